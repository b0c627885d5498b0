//! CSV report emission and aggregation of stored outcomes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{ExperimentResults, BASELINE};
use crate::metrics::{ace, brier, ece, isotonic_fit, reliability_curve, DEFAULT_BINS};
use crate::metrics::{field_accuracy, mean_cer, pearson, unanimous_precision_recall, EvalOutcome, MetricError};
use crate::model::FieldName;
use crate::selection::Method;
use crate::theory::SweepRow;

pub const TABLE1: &str = "table1.csv";
pub const TABLE2: &str = "table2.csv";
pub const CALIBRATION: &str = "calibration.csv";
pub const CALIBRATION_CURVE: &str = "calibration_curve.csv";
pub const PR_UNANIMOUS: &str = "pr_unanimous.csv";
pub const OUTCOMES: &str = "outcomes.csv";
pub const FIG2: &str = "fig2_cer_vs_samples.csv";
pub const FIG3: &str = "fig3_selection_methods.csv";
pub const FIG4: &str = "fig4_unanimous_pr.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path} line {line}: {reason}")]
    Malformed { path: PathBuf, line: u64, reason: String },
    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<PathBuf>),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(path: PathBuf) -> Result<Self, ReportError> {
        let writer = csv::Writer::from_path(&path).map_err(|source| ReportError::Csv {
            path: path.clone(),
            source,
        })?;
        Ok(Self { path, writer })
    }

    fn row<S: Serialize>(&mut self, row: S) -> Result<(), ReportError> {
        self.writer.serialize(row).map_err(|source| ReportError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    fn record<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<(), ReportError> {
        self.writer
            .write_record(fields.into_iter().collect::<Vec<_>>())
            .map_err(|source| ReportError::Csv {
                path: self.path.clone(),
                source,
            })
    }

    fn finish(mut self) -> Result<PathBuf, ReportError> {
        self.writer.flush().map_err(|source| ReportError::Io {
            path: self.path.clone(),
            source,
        })?;
        Ok(self.path)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Serialize)]
struct Table2Row<'a> {
    category: &'a str,
    method: &'a str,
    n_samples: usize,
    cer_pct: f64,
    field_acc_pct: f64,
    n_fields: usize,
}

#[derive(Debug, Serialize)]
struct CalibrationRow<'a> {
    category: &'a str,
    n_exp: usize,
    n_rec: usize,
    corr_raw: Option<f64>,
    corr_isotonic: Option<f64>,
    ece_raw: f64,
    ece_isotonic: f64,
    ace_raw: f64,
    ace_isotonic: f64,
    brier_raw: f64,
    brier_isotonic: f64,
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    category: &'a str,
    calibration: &'a str,
    bin_center: f64,
    mean_confidence: f64,
    accuracy: f64,
    count: usize,
}

#[derive(Debug, Serialize)]
struct PrRow<'a> {
    category: &'a str,
    method: &'a str,
    n_samples: usize,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    n_unanimous: usize,
    n_correct: usize,
    n_fields: usize,
}

/// One scored field as stored in `outcomes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub category: String,
    pub method: String,
    pub n_samples: usize,
    pub fold: usize,
    pub record_id: String,
    pub field: String,
    pub predicted: Option<String>,
    pub truth: String,
    pub exact_match: bool,
    pub cer: f64,
    pub confidence: f64,
    pub unanimous: bool,
}

impl OutcomeRow {
    fn new(category: &str, method: Method, n_samples: usize, fold: usize, o: &EvalOutcome) -> Self {
        Self {
            category: category.to_owned(),
            method: method.slug().to_owned(),
            n_samples,
            fold,
            record_id: o.record_id.clone(),
            field: o.field.as_str().to_owned(),
            predicted: o.predicted.clone(),
            truth: o.truth.clone(),
            exact_match: o.exact_match,
            cer: o.cer,
            confidence: o.confidence,
            unanimous: o.unanimous,
        }
    }
}

fn metrics(outcomes: &[EvalOutcome]) -> Result<(f64, f64), ReportError> {
    Ok((pct(mean_cer(outcomes)?), field_accuracy(outcomes)?))
}

/// Raw and cross-fitted isotonic confidences: each fold's map is fit on the
/// outcomes of all other folds.
fn cross_fit(folds: &[(usize, &[EvalOutcome])]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let (mut raw, mut fitted, mut hits) = (Vec::new(), Vec::new(), Vec::new());
    for &(fold, outcomes) in folds {
        let (train_c, train_y): (Vec<f64>, Vec<bool>) = folds
            .iter()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, o)| o.iter().map(|o| (o.confidence, o.exact_match)))
            .unzip();
        let map = (!train_c.is_empty()).then(|| isotonic_fit(&train_c, &train_y));
        for o in outcomes {
            raw.push(o.confidence);
            fitted.push(map.as_ref().map_or(o.confidence, |m| m.apply(o.confidence)));
            hits.push(o.exact_match);
        }
    }
    (raw, fitted, hits)
}

fn correlation(confs: &[f64], hits: &[bool]) -> Option<f64> {
    let y: Vec<f64> = hits.iter().map(|&h| f64::from(u8::from(h))).collect();
    pearson(confs, &y).ok()
}

/// Writes every report CSV into `dir` and returns the paths written.
pub fn write_reports(results: &ExperimentResults, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let sizes = &results.sizes;
    let baseline: Vec<EvalOutcome> = results.baseline.iter().map(|(_, o)| o.clone()).collect();
    let mut written = Vec::new();

    let mut t1 = CsvOut::create(dir.join(TABLE1))?;
    let mut header = vec!["category".to_owned(), "pool_size".into(), "avg_cer_pct".into()];
    for n in sizes {
        header.push(format!("consensus_cer_pct_{n}"));
    }
    for n in sizes {
        header.push(format!("field_acc_pct_{n}"));
    }
    header.push("error_corr".into());
    t1.record(header)?;
    if !baseline.is_empty() {
        let (cer, _) = metrics(&baseline)?;
        let mut row = vec![BASELINE.to_owned(), "1".into(), cer.to_string()];
        row.extend(std::iter::repeat_n(String::new(), 2 * sizes.len() + 1));
        t1.record(row)?;
    }
    for cat in &results.categories {
        let mut cers = Vec::new();
        let mut accs = Vec::new();
        for &n in sizes {
            let pooled = cat.cv.pooled(Method::TopIndividual, n);
            if pooled.is_empty() {
                cers.push(String::new());
                accs.push(String::new());
            } else {
                let (c, a) = metrics(&pooled)?;
                cers.push(c.to_string());
                accs.push(a.to_string());
            }
        }
        let mut row = vec![
            cat.name.clone(),
            cat.pool_size.to_string(),
            opt(cat.avg_member_cer.map(pct)),
        ];
        row.extend(cers);
        row.extend(accs);
        row.push(opt(cat.error_corr));
        t1.record(row)?;
    }
    written.push(t1.finish()?);

    let mut t2 = CsvOut::create(dir.join(TABLE2))?;
    let mut pr = CsvOut::create(dir.join(PR_UNANIMOUS))?;
    if !baseline.is_empty() {
        let (cer_pct, field_acc_pct) = metrics(&baseline)?;
        t2.row(Table2Row {
            category: BASELINE,
            method: Method::Baseline.slug(),
            n_samples: 1,
            cer_pct,
            field_acc_pct,
            n_fields: baseline.len(),
        })?;
    }
    for cat in &results.categories {
        for method in Method::SELECTING {
            for &n in sizes {
                let pooled = cat.cv.pooled(method, n);
                if pooled.is_empty() {
                    continue;
                }
                let (cer_pct, field_acc_pct) = metrics(&pooled)?;
                t2.row(Table2Row {
                    category: &cat.name,
                    method: method.slug(),
                    n_samples: n,
                    cer_pct,
                    field_acc_pct,
                    n_fields: pooled.len(),
                })?;
                let p = unanimous_precision_recall(&pooled);
                pr.row(PrRow {
                    category: &cat.name,
                    method: method.slug(),
                    n_samples: n,
                    precision: p.precision,
                    recall: p.recall,
                    f1: p.f1,
                    n_unanimous: p.n_unanimous,
                    n_correct: p.n_correct,
                    n_fields: pooled.len(),
                })?;
            }
        }
    }
    written.push(t2.finish()?);
    written.push(pr.finish()?);

    let mut cal = CsvOut::create(dir.join(CALIBRATION))?;
    let mut curve = CsvOut::create(dir.join(CALIBRATION_CURVE))?;
    for cat in &results.categories {
        let Some(n) = sizes.iter().copied().filter(|&n| n <= cat.pool_size).max() else {
            continue;
        };
        let folds: Vec<(usize, &[EvalOutcome])> = cat
            .cv
            .evals
            .iter()
            .filter(|e| e.method == Method::TopIndividual && e.size == n)
            .map(|e| (e.fold, e.outcomes.as_slice()))
            .collect();
        let (raw, fitted, hits) = cross_fit(&folds);
        if raw.is_empty() {
            continue;
        }
        let records: BTreeSet<&str> = folds
            .iter()
            .flat_map(|(_, o)| o.iter().map(|o| o.record_id.as_str()))
            .collect();
        log::debug!("{}: calibration over {} records", cat.name, records.len());
        cal.row(CalibrationRow {
            category: &cat.name,
            n_exp: n,
            n_rec: raw.len(),
            corr_raw: correlation(&raw, &hits),
            corr_isotonic: correlation(&fitted, &hits),
            ece_raw: ece(&raw, &hits, DEFAULT_BINS)?,
            ece_isotonic: ece(&fitted, &hits, DEFAULT_BINS)?,
            ace_raw: ace(&raw, &hits, DEFAULT_BINS)?,
            ace_isotonic: ace(&fitted, &hits, DEFAULT_BINS)?,
            brier_raw: brier(&raw, &hits)?,
            brier_isotonic: brier(&fitted, &hits)?,
        })?;
        for (label, confs) in [("raw", &raw), ("isotonic", &fitted)] {
            for bin in reliability_curve(confs, &hits, DEFAULT_BINS)? {
                curve.row(CurveRow {
                    category: &cat.name,
                    calibration: label,
                    bin_center: bin.bin_center,
                    mean_confidence: bin.mean_confidence,
                    accuracy: bin.accuracy,
                    count: bin.count,
                })?;
            }
        }
    }
    written.push(cal.finish()?);
    written.push(curve.finish()?);

    let mut out = CsvOut::create(dir.join(OUTCOMES))?;
    for (fold, o) in &results.baseline {
        out.row(OutcomeRow::new(BASELINE, Method::Baseline, 1, *fold, o))?;
    }
    for cat in &results.categories {
        for e in &cat.cv.evals {
            for o in &e.outcomes {
                out.row(OutcomeRow::new(&cat.name, e.method, e.size, e.fold, o))?;
            }
        }
    }
    written.push(out.finish()?);
    Ok(written)
}

/// Writes the theory sweep as CSV.
pub fn write_sweep<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads `outcomes.csv`; errors name the offending line.
pub fn read_outcomes(path: &Path) -> Result<Vec<OutcomeRow>, ReportError> {
    if !path.is_file() {
        return Err(ReportError::Missing(vec![path.to_owned()]));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|source| ReportError::Csv {
        path: path.to_owned(),
        source,
    })?;
    let mut rows = Vec::new();
    for result in reader.deserialize::<OutcomeRow>() {
        let row = result.map_err(|e| ReportError::Malformed {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        if Method::parse(&row.method).is_none() || FieldName::parse(&row.field).is_none() {
            return Err(ReportError::Malformed {
                path: path.to_owned(),
                line: rows.len() as u64 + 2,
                reason: format!("unknown method {:?} or field {:?}", row.method, row.field),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Default)]
struct Tally {
    n: usize,
    cer_sum: f64,
    exact: usize,
    unanimous: usize,
    both: usize,
}

impl Tally {
    fn add(&mut self, r: &OutcomeRow) {
        self.n += 1;
        self.cer_sum += r.cer;
        self.exact += usize::from(r.exact_match);
        self.unanimous += usize::from(r.unanimous);
        self.both += usize::from(r.unanimous && r.exact_match);
    }

    fn cer_pct(&self) -> f64 {
        pct(self.cer_sum / self.n as f64)
    }

    fn acc_pct(&self) -> f64 {
        pct(self.exact as f64 / self.n as f64)
    }
}

#[derive(Debug, Serialize)]
struct SeriesRow<'a> {
    category: &'a str,
    method: &'a str,
    n_samples: usize,
    cer_pct: f64,
    field_acc_pct: f64,
    n_fields: usize,
}

#[derive(Debug, Serialize)]
struct Fig4Row<'a> {
    category: &'a str,
    n_samples: usize,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
}

/// Aggregates `outcomes.csv` into figure-shaped series. An empty category
/// filter keeps every category.
pub fn aggregate_reports(outcomes: &Path, categories: &[String], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let rows = read_outcomes(outcomes)?;
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let keep = |c: &str| categories.is_empty() || c == BASELINE || categories.iter().any(|k| k == c);
    let mut tallies: BTreeMap<(String, String, usize), Tally> = BTreeMap::new();
    for r in rows.iter().filter(|r| keep(&r.category)) {
        tallies
            .entry((r.category.clone(), r.method.clone(), r.n_samples))
            .or_default()
            .add(r);
    }

    let mut written = Vec::new();
    let mut fig2 = CsvOut::create(out_dir.join(FIG2))?;
    let mut fig3 = CsvOut::create(out_dir.join(FIG3))?;
    let mut fig4 = CsvOut::create(out_dir.join(FIG4))?;
    for ((category, method, n), t) in &tallies {
        let row = SeriesRow {
            category,
            method,
            n_samples: *n,
            cer_pct: t.cer_pct(),
            field_acc_pct: t.acc_pct(),
            n_fields: t.n,
        };
        if method == Method::TopIndividual.slug() || method == Method::Baseline.slug() {
            fig2.row(&row)?;
        }
        fig3.row(&row)?;
        if method == Method::TopIndividual.slug() {
            let precision = (t.unanimous > 0).then(|| t.both as f64 / t.unanimous as f64);
            let recall = (t.exact > 0).then(|| t.both as f64 / t.exact as f64);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            fig4.row(Fig4Row {
                category,
                n_samples: *n,
                precision,
                recall,
                f1,
            })?;
        }
    }
    written.push(fig2.finish()?);
    written.push(fig3.finish()?);
    written.push(fig4.finish()?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(category: &str, method: &str, n: usize, exact: bool) -> OutcomeRow {
        OutcomeRow {
            category: category.into(),
            method: method.into(),
            n_samples: n,
            fold: 0,
            record_id: "r".into(),
            field: FieldName::SelfGivenName.as_str().into(),
            predicted: Some("x".into()),
            truth: "x".into(),
            exact_match: exact,
            cer: if exact { 0.0 } else { 1.0 },
            confidence: 1.0,
            unanimous: exact,
        }
    }

    fn write_rows(path: &Path, rows: &[OutcomeRow]) {
        let mut w = csv::Writer::from_path(path).unwrap();
        for r in rows {
            w.serialize(r).unwrap();
        }
        w.flush().unwrap();
    }

    #[test]
    fn fig2_has_one_point_per_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTCOMES);
        let rows: Vec<_> = [1, 5, 10]
            .into_iter()
            .flat_map(|n| [row("pad", "top-individual", n, true), row("pad", "greedy", n, false)])
            .collect();
        write_rows(&path, &rows);
        aggregate_reports(&path, &[], dir.path()).unwrap();
        let fig2 = fs::read_to_string(dir.path().join(FIG2)).unwrap();
        assert_eq!(fig2.lines().count(), 4);
        let fig3 = fs::read_to_string(dir.path().join(FIG3)).unwrap();
        assert_eq!(fig3.lines().count(), 7);
    }

    #[test]
    fn category_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTCOMES);
        write_rows(
            &path,
            &[row("pad", "greedy", 5, true), row("resize", "greedy", 5, true)],
        );
        aggregate_reports(&path, &["resize".into()], dir.path()).unwrap();
        let fig3 = fs::read_to_string(dir.path().join(FIG3)).unwrap();
        assert!(fig3.contains("resize") && !fig3.contains("pad"));
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTCOMES);
        write_rows(&path, &[row("pad", "greedy", 5, true)]);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("pad,greedy,notanumber,0,r,SelfGivenName,x,x,true,0,1,true\n");
        fs::write(&path, text).unwrap();
        let err = aggregate_reports(&path, &[], dir.path()).unwrap_err();
        assert!(matches!(err, ReportError::Malformed { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn missing_input_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.csv");
        let err = aggregate_reports(&path, &[], dir.path()).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
    }
}
