//! Accuracy, agreement and calibration measures.

mod calibration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FieldName;
use crate::text::normalize_text;

pub use calibration::{ace, brier, ece, isotonic_fit, reliability_curve, CalibrationMap, ReliabilityBin, DEFAULT_BINS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground truth is empty after normalization")]
    EmptyTruth,
    #[error("no inputs")]
    Empty,
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least two observations")]
    TooShort,
    #[error("correlation is undefined for a constant vector")]
    ConstantVector,
    #[error("number of bins must be positive")]
    ZeroBins,
}

/// Edit distance with unit insert/delete/substitute costs.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `pred` against `truth`, both normalized.
///
/// An absent prediction scores 1. Long wrong predictions can exceed 1.
pub fn cer(pred: Option<&str>, truth: &str) -> Result<f64, MetricError> {
    let truth: Vec<char> = normalize_text(truth).chars().collect();
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    let Some(pred) = pred else {
        return Ok(1.0);
    };
    let pred: Vec<char> = normalize_text(pred).chars().collect();
    Ok(levenshtein(&pred, &truth) as f64 / truth.len() as f64)
}

pub fn exact_match(pred: Option<&str>, truth: &str) -> bool {
    pred.is_some_and(|p| normalize_text(p) == normalize_text(truth))
}

/// Scored prediction for one field of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub record_id: String,
    pub field: FieldName,
    pub predicted: Option<String>,
    pub truth: String,
    pub exact_match: bool,
    pub cer: f64,
    pub confidence: f64,
    pub unanimous: bool,
}

impl EvalOutcome {
    pub fn score(
        record_id: impl Into<String>,
        field: FieldName,
        predicted: Option<&str>,
        truth: &str,
        confidence: f64,
        unanimous: bool,
    ) -> Result<Self, MetricError> {
        Ok(Self {
            record_id: record_id.into(),
            field,
            predicted: predicted.map(str::to_owned),
            truth: truth.to_owned(),
            exact_match: exact_match(predicted, truth),
            cer: cer(predicted, truth)?,
            confidence,
            unanimous,
        })
    }
}

/// Percentage of outcomes that match their truth exactly.
pub fn field_accuracy(outcomes: &[EvalOutcome]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = outcomes.iter().filter(|o| o.exact_match).count();
    Ok(100.0 * hits as f64 / outcomes.len() as f64)
}

pub fn mean_cer(outcomes: &[EvalOutcome]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(outcomes.iter().map(|o| o.cer).sum::<f64>() / outcomes.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooShort);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ConstantVector);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// Pearson correlation of two binary error vectors.
pub fn error_correlation(errs_a: &[bool], errs_b: &[bool]) -> Result<f64, MetricError> {
    let to_f = |v: &[bool]| v.iter().map(|&e| f64::from(u8::from(e))).collect::<Vec<_>>();
    pearson(&to_f(errs_a), &to_f(errs_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub n_unanimous: usize,
    pub n_correct: usize,
}

/// Precision/recall of "unanimous" as a predictor of a correct field.
///
/// Components with a zero denominator are `None`.
pub fn unanimous_precision_recall(outcomes: &[EvalOutcome]) -> PrecisionRecall {
    let n_unanimous = outcomes.iter().filter(|o| o.unanimous).count();
    let n_correct = outcomes.iter().filter(|o| o.exact_match).count();
    let both = outcomes.iter().filter(|o| o.unanimous && o.exact_match).count() as f64;
    let precision = (n_unanimous > 0).then(|| both / n_unanimous as f64);
    let recall = (n_correct > 0).then(|| both / n_correct as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
        n_unanimous,
        n_correct,
    }
}
