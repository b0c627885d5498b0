//! Ensemble selection and the k-fold cross-validation harness.
//!
//! A [`CandidatePool`] holds one cached transcription per (spec, record).
//! Selection strategies only re-run consensus over these cached strings.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::consensus::{field_confidence, progressive_consensus, CaseMode, ConsensusBuilder, SampleSet};
use crate::metrics::{cer, EvalOutcome, MetricError};
use crate::model::{FieldName, FieldSet};
use crate::par::*;
use crate::rng;
use crate::text::normalize_text;

const TAG_FOLDS: u64 = 0xf01d;
/// Scores closer than this are ties; summation order must not decide them.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("asked for {k} specs from a pool of {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("k-fold split needs k >= 2, got {0}")]
    TooFewFolds(usize),
    #[error("cannot split {n} records into {k} folds")]
    TooFewRecords { k: usize, n: usize },
    #[error("unknown spec key {0:?}")]
    UnknownSpec(String),
    #[error("duplicate spec key {0:?}")]
    DuplicateSpec(String),
    #[error("spec {spec:?} has {got} outputs for {expected} records")]
    Shape { spec: String, got: usize, expected: usize },
    #[error("no scorable fields in the selected records")]
    NoTargets,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub id: String,
    pub truth: FieldSet,
}

/// Cached per-spec transcriptions over a shared record set.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    records: Vec<PoolRecord>,
    specs: Vec<String>,
    /// `outputs[spec][record]`
    outputs: Vec<Vec<FieldSet>>,
    index: HashMap<String, usize>,
}

impl CandidatePool {
    pub fn new(records: Vec<PoolRecord>, specs: Vec<(String, Vec<FieldSet>)>) -> Result<Self, SelectionError> {
        let mut index = HashMap::new();
        let mut keys = Vec::with_capacity(specs.len());
        let mut outputs = Vec::with_capacity(specs.len());
        for (i, (key, outs)) in specs.into_iter().enumerate() {
            if outs.len() != records.len() {
                return Err(SelectionError::Shape {
                    spec: key,
                    got: outs.len(),
                    expected: records.len(),
                });
            }
            if index.insert(key.clone(), i).is_some() {
                return Err(SelectionError::DuplicateSpec(key));
            }
            keys.push(key);
            outputs.push(outs);
        }
        Ok(Self {
            records,
            specs: keys,
            outputs,
            index,
        })
    }

    pub fn records(&self) -> &[PoolRecord] {
        &self.records
    }

    pub fn spec_keys(&self) -> &[String] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn all_records(&self) -> Vec<usize> {
        (0..self.records.len()).collect()
    }

    pub fn output(&self, spec: &str, record: usize) -> Option<&FieldSet> {
        self.index.get(spec).map(|&s| &self.outputs[s][record])
    }

    fn spec_index(&self, key: &str) -> Result<usize, SelectionError> {
        self.index
            .get(key)
            .copied()
            .ok_or_else(|| SelectionError::UnknownSpec(key.to_owned()))
    }

    /// Fields with a non-blank truth; these are the ones that get scored.
    pub fn targets(&self, record: usize) -> impl Iterator<Item = (FieldName, &str)> + '_ {
        self.records[record]
            .truth
            .iter()
            .filter_map(|(f, v)| v.filter(|t| !normalize_text(t).is_empty()).map(|t| (f, t)))
    }

    /// Outcomes of one spec's single transcription.
    pub fn individual_outcomes(&self, spec: &str, records: &[usize]) -> Result<Vec<EvalOutcome>, SelectionError> {
        let s = self.spec_index(spec)?;
        let mut out = Vec::new();
        for &r in records {
            for (field, truth) in self.targets(r) {
                let pred = self.outputs[s][r].get(field);
                out.push(EvalOutcome::score(&self.records[r].id, field, pred, truth, 1.0, true)?);
            }
        }
        Ok(out)
    }

    /// Consensus outcomes with samples merged in the given spec order.
    pub fn consensus_outcomes(&self, specs: &[String], records: &[usize]) -> Result<Vec<EvalOutcome>, SelectionError> {
        let idx = specs
            .iter()
            .map(|k| self.spec_index(k))
            .collect::<Result<Vec<_>, _>>()?;
        self.consensus_by_index(&idx, records)
    }

    fn consensus_by_index(&self, specs: &[usize], records: &[usize]) -> Result<Vec<EvalOutcome>, SelectionError> {
        let per_record: Vec<Result<Vec<EvalOutcome>, MetricError>> = records
            .par_iter()
            .map(|&r| {
                let mut out = Vec::new();
                for (field, truth) in self.targets(r) {
                    let set = SampleSet::new(
                        specs
                            .iter()
                            .map(|&s| self.outputs[s][r].get(field).map(str::to_owned))
                            .collect(),
                        specs.iter().map(|&s| self.specs[s].clone()).collect(),
                    );
                    let res = progressive_consensus(&set, CaseMode::Fold);
                    out.push(EvalOutcome::score(
                        &self.records[r].id,
                        field,
                        res.prediction(),
                        truth,
                        field_confidence(&res),
                        res.unanimous,
                    )?);
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::new();
        for chunk in per_record {
            all.extend(chunk?);
        }
        Ok(all)
    }

    fn consensus_cer(&self, specs: &[usize], records: &[usize]) -> Result<f64, SelectionError> {
        mean_cer_of(&self.consensus_by_index(specs, records)?)
    }

    fn individual_cer(&self, spec: usize, records: &[usize]) -> Result<f64, SelectionError> {
        self.consensus_cer(&[spec], records)
    }
}

fn mean_cer_of(outcomes: &[EvalOutcome]) -> Result<f64, SelectionError> {
    if outcomes.is_empty() {
        return Err(SelectionError::NoTargets);
    }
    Ok(outcomes.iter().map(|o| o.cer).sum::<f64>() / outcomes.len() as f64)
}

/// Fold assignment for cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Uses fold labels shipped with a dataset.
    pub fn from_labels(ids: &[String], labels: &[usize], k: usize) -> Result<Self, SelectionError> {
        if k < 2 {
            return Err(SelectionError::TooFewFolds(k));
        }
        let assignment = ids.iter().cloned().zip(labels.iter().map(|&l| l % k)).collect();
        Ok(Self { k, assignment, seed: 0 })
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffled partition into `k` folds whose sizes differ by at most one.
pub fn kfold_split(record_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, SelectionError> {
    if k < 2 {
        return Err(SelectionError::TooFewFolds(k));
    }
    if k > record_ids.len() {
        return Err(SelectionError::TooFewRecords { k, n: record_ids.len() });
    }
    let mut order: Vec<&String> = record_ids.iter().collect();
    order.sort();
    order.shuffle(&mut rng::stream(&[seed, TAG_FOLDS]));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldPlan { k, assignment, seed })
}

fn check_k(pool: &CandidatePool, k: usize) -> Result<(), SelectionError> {
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    if k > pool.len() {
        return Err(SelectionError::KTooLarge { k, pool: pool.len() });
    }
    Ok(())
}

/// Spec indices in key order, so that ties resolve towards the smaller key.
fn key_order(pool: &CandidatePool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool.specs[a].cmp(&pool.specs[b]));
    order
}

/// The `k` specs with the lowest mean individual CER on `records`.
pub fn select_top_individual(pool: &CandidatePool, k: usize, records: &[usize]) -> Result<Vec<String>, SelectionError> {
    check_k(pool, k)?;
    let mut scored = Vec::with_capacity(pool.len());
    for s in key_order(pool) {
        scored.push((pool.individual_cer(s, records)?, s));
    }
    // Stable sort keeps key order among equal scores.
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().take(k).map(|(_, s)| pool.specs[s].clone()).collect())
}

/// Running consensus tallies of the specs chosen so far, one per scored field.
struct GreedyState<'a> {
    pool: &'a CandidatePool,
    records: &'a [usize],
    /// Per record: (field, truth, tally of the chosen specs).
    tallies: Vec<Vec<(FieldName, &'a str, ConsensusBuilder)>>,
}

impl<'a> GreedyState<'a> {
    fn new(pool: &'a CandidatePool, records: &'a [usize]) -> Self {
        let tallies = records
            .iter()
            .map(|&r| {
                pool.targets(r)
                    .map(|(f, t)| (f, t, ConsensusBuilder::new(CaseMode::Fold)))
                    .collect()
            })
            .collect();
        Self { pool, records, tallies }
    }

    /// Mean consensus CER if `spec` were merged next.
    fn trial_cer(&self, spec: usize) -> Result<f64, SelectionError> {
        let partial: Vec<Result<(f64, usize), MetricError>> = self
            .records
            .par_iter()
            .zip(self.tallies.par_iter())
            .map(|(&r, fields)| {
                let mut sum = 0.0;
                for (field, truth, tally) in fields {
                    let mut trial = tally.clone();
                    trial.push(self.pool.outputs[spec][r].get(*field));
                    sum += cer(trial.finish().prediction(), truth)?;
                }
                Ok((sum, fields.len()))
            })
            .collect();
        let (mut sum, mut count) = (0.0, 0);
        for p in partial {
            let (s, c) = p?;
            sum += s;
            count += c;
        }
        if count == 0 {
            return Err(SelectionError::NoTargets);
        }
        Ok(sum / count as f64)
    }

    fn commit(&mut self, spec: usize) {
        let pool = self.pool;
        for (&r, fields) in self.records.iter().zip(self.tallies.iter_mut()) {
            for (field, _, tally) in fields {
                tally.push(pool.outputs[spec][r].get(*field));
            }
        }
    }
}

/// Greedy forward selection minimizing consensus CER on `records`.
pub fn select_greedy_consensus(
    pool: &CandidatePool,
    k: usize,
    records: &[usize],
) -> Result<Vec<String>, SelectionError> {
    check_k(pool, k)?;
    let order = key_order(pool);
    let mut state = GreedyState::new(pool, records);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for &s in order.iter().filter(|s| !chosen.contains(s)) {
            let score = state.trial_cer(s)?;
            if best.is_none_or(|(b, _)| score < b - TIE_EPS) {
                best = Some((score, s));
            }
        }
        // check_k guarantees a candidate remains.
        let pick = best.map(|(_, s)| s).unwrap_or_default();
        state.commit(pick);
        chosen.push(pick);
    }
    Ok(chosen.into_iter().map(|s| pool.specs[s].clone()).collect())
}

/// Greedy selection scored directly on the evaluation records. This leaks
/// test labels and only serves as an upper reference.
pub fn select_oracle(pool: &CandidatePool, k: usize, eval_records: &[usize]) -> Result<Vec<String>, SelectionError> {
    select_greedy_consensus(pool, k, eval_records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Method {
    Baseline,
    TopIndividual,
    Greedy,
    Oracle,
}

impl Method {
    pub const SELECTING: [Method; 3] = [Method::TopIndividual, Method::Greedy, Method::Oracle];

    pub fn slug(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::TopIndividual => "top-individual",
            Method::Greedy => "greedy",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Baseline, Method::TopIndividual, Method::Greedy, Method::Oracle]
            .into_iter()
            .find(|m| m.slug() == s)
    }
}

/// Held-out outcomes of one method at one ensemble size in one fold.
#[derive(Debug, Clone)]
pub struct FoldEval {
    pub fold: usize,
    pub method: Method,
    pub size: usize,
    pub selected: Vec<String>,
    pub outcomes: Vec<EvalOutcome>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub plan: FoldPlan,
    pub evals: Vec<FoldEval>,
}

impl CvReport {
    /// All held-out outcomes for (method, size), concatenated over folds.
    pub fn pooled(&self, method: Method, size: usize) -> Vec<EvalOutcome> {
        self.evals
            .iter()
            .filter(|e| e.method == method && e.size == size)
            .flat_map(|e| e.outcomes.iter().cloned())
            .collect()
    }
}

/// Selects on k-1 folds and evaluates on the held-out fold, for every
/// selecting method and ensemble size. Sizes above the pool size are
/// skipped. Both greedy strategies and the ranking are prefix-consistent, so
/// each fold runs one selection at the largest size.
pub fn run_cv_experiment(
    pool: &CandidatePool,
    plan: &FoldPlan,
    ensemble_sizes: &[usize],
) -> Result<CvReport, SelectionError> {
    let sizes: Vec<usize> = ensemble_sizes
        .iter()
        .copied()
        .filter(|&s| s >= 1 && s <= pool.len())
        .collect();
    let Some(&max) = sizes.iter().max() else {
        return Ok(CvReport {
            plan: plan.clone(),
            evals: Vec::new(),
        });
    };
    let mut evals = Vec::new();
    for fold in 0..plan.k {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, rec) in pool.records.iter().enumerate() {
            match plan.fold_of(&rec.id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {}
            }
        }
        if test.is_empty() || train.is_empty() {
            continue;
        }
        for method in Method::SELECTING {
            let order = match method {
                Method::TopIndividual => select_top_individual(pool, max, &train)?,
                Method::Greedy => select_greedy_consensus(pool, max, &train)?,
                Method::Oracle => select_oracle(pool, max, &test)?,
                Method::Baseline => unreachable!("baseline is not a selection method"),
            };
            for &size in &sizes {
                let selected = order[..size].to_vec();
                let outcomes = pool.consensus_outcomes(&selected, &test)?;
                evals.push(FoldEval {
                    fold,
                    method,
                    size,
                    selected,
                    outcomes,
                });
            }
        }
    }
    Ok(CvReport {
        plan: plan.clone(),
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(given: &str, surname: &str) -> FieldSet {
        FieldSet::new()
            .with(FieldName::SelfGivenName, given)
            .with(FieldName::SelfSurname, surname)
    }

    fn pool(specs: &[(&str, &[(&str, &str)])], truths: &[(&str, &str)]) -> CandidatePool {
        let records = truths
            .iter()
            .enumerate()
            .map(|(i, (g, s))| PoolRecord {
                id: format!("r{i}"),
                truth: fs(g, s),
            })
            .collect();
        let specs = specs
            .iter()
            .map(|(k, outs)| (k.to_string(), outs.iter().map(|(g, s)| fs(g, s)).collect()))
            .collect();
        CandidatePool::new(records, specs).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("rec{i:03}")).collect()
    }

    #[test]
    fn kfold_balanced() {
        let plan = kfold_split(&ids(10), 5, 1).unwrap();
        assert_eq!(plan.sizes(), vec![2; 5]);
        let mut sizes = kfold_split(&ids(11), 5, 1).unwrap().sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn kfold_deterministic_and_seeded() {
        assert_eq!(
            kfold_split(&ids(30), 5, 9).unwrap(),
            kfold_split(&ids(30), 5, 9).unwrap()
        );
        assert_ne!(
            kfold_split(&ids(30), 5, 9).unwrap().assignment,
            kfold_split(&ids(30), 5, 10).unwrap().assignment
        );
    }

    #[test]
    fn kfold_errors() {
        assert!(matches!(
            kfold_split(&ids(3), 5, 0),
            Err(SelectionError::TooFewRecords { .. })
        ));
        assert!(matches!(
            kfold_split(&ids(3), 1, 0),
            Err(SelectionError::TooFewFolds(1))
        ));
    }

    #[test]
    fn top_individual_sorts_by_cer() {
        let truths = [("abcdefghij", "klmnopqrst")];
        let p = pool(
            &[
                ("c", &[("abcdefghij", "xxxxxxxxxx")]),
                ("a", &[("abcdefghij", "klmnopqrsx")]),
                ("b", &[("abcdefghij", "klmnopqrxx")]),
            ],
            &truths,
        );
        let all = p.all_records();
        assert_eq!(select_top_individual(&p, 2, &all).unwrap(), vec!["a", "b"]);
        assert_eq!(select_top_individual(&p, 3, &all).unwrap().len(), 3);
        assert!(matches!(select_top_individual(&p, 0, &all), Err(SelectionError::ZeroK)));
    }

    #[test]
    fn ties_follow_key_order() {
        let truths = [("anna", "berg")];
        let p = pool(&[("z", &[("anna", "berg")]), ("m", &[("anna", "berg")])], &truths);
        let all = p.all_records();
        assert_eq!(select_top_individual(&p, 1, &all).unwrap(), vec!["m"]);
        assert_eq!(select_greedy_consensus(&p, 1, &all).unwrap(), vec!["m"]);
    }

    #[test]
    fn greedy_of_one_is_best_individual() {
        let truths = [("anna", "berg"), ("carl", "dahl")];
        let p = pool(
            &[
                ("a", &[("anna", "berx"), ("carl", "dahl")]),
                ("b", &[("anxx", "berg"), ("carl", "dahl")]),
            ],
            &truths,
        );
        let all = p.all_records();
        assert_eq!(
            select_greedy_consensus(&p, 1, &all).unwrap(),
            select_top_individual(&p, 1, &all).unwrap()
        );
        assert!(matches!(
            select_greedy_consensus(&p, 3, &all),
            Err(SelectionError::KTooLarge { .. })
        ));
    }

    #[test]
    fn incremental_scores_match_full_consensus() {
        use crate::transcriber::{simulate_transcribe, NoiseModel};
        let records: Vec<PoolRecord> = (0..12)
            .map(|i| PoolRecord {
                id: format!("r{i}"),
                truth: fs(&format!("given{}name", i * 7), &format!("surname{i}")),
            })
            .collect();
        let model = NoiseModel {
            op_mix: [0.5, 0.25, 0.25],
            ..NoiseModel::new(0.25, 0.2, 3)
        };
        let specs = (0..6)
            .map(|s| {
                let outs = records
                    .iter()
                    .map(|r| simulate_transcribe(&r.truth, &model.for_record(&r.id), s))
                    .collect();
                (format!("s{s}"), outs)
            })
            .collect();
        let p = CandidatePool::new(records, specs).unwrap();
        let all = p.all_records();
        let mut state = GreedyState::new(&p, &all);
        let mut chosen = Vec::new();
        for s in [3, 0, 5, 1] {
            for cand in 0..p.len() {
                let mut full = chosen.clone();
                full.push(cand);
                let a = state.trial_cer(cand).unwrap();
                let b = p.consensus_cer(&full, &all).unwrap();
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            state.commit(s);
            chosen.push(s);
        }
    }

    #[test]
    fn oracle_on_validation_equals_greedy() {
        let truths = [("anna", "berg"), ("carl", "dahl")];
        let p = pool(
            &[
                ("a", &[("anna", "berx"), ("carl", "dahl")]),
                ("b", &[("anxx", "berg"), ("carl", "dahx")]),
                ("c", &[("anna", "berg"), ("caxl", "dahl")]),
            ],
            &truths,
        );
        let all = p.all_records();
        for k in 1..=3 {
            assert_eq!(
                select_oracle(&p, k, &all).unwrap(),
                select_greedy_consensus(&p, k, &all).unwrap()
            );
        }
    }

    #[test]
    fn blank_truths_are_not_scored() {
        let records = vec![PoolRecord {
            id: "r".into(),
            truth: FieldSet::new()
                .with(FieldName::SelfGivenName, "anna")
                .with(FieldName::SelfSurname, "  "),
        }];
        let p = CandidatePool::new(records, vec![("a".into(), vec![FieldSet::new()])]).unwrap();
        let out = p.individual_outcomes("a", &[0]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cer, 1.0);
    }

    #[test]
    fn shape_is_checked() {
        let records = vec![PoolRecord {
            id: "r".into(),
            truth: FieldSet::new(),
        }];
        let err = CandidatePool::new(records, vec![("a".into(), vec![])]).unwrap_err();
        assert!(matches!(err, SelectionError::Shape { .. }));
    }

    #[test]
    fn cv_covers_every_record_once_per_method_and_size() {
        let truths: Vec<(String, String)> = (0..10).map(|i| (format!("given{i}"), format!("sur{i}"))).collect();
        let truth_refs: Vec<(&str, &str)> = truths.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let specs: Vec<(String, Vec<(&str, &str)>)> = (0..4).map(|s| (format!("s{s}"), truth_refs.clone())).collect();
        let spec_refs: Vec<(&str, &[(&str, &str)])> = specs.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        let p = pool(&spec_refs, &truth_refs);
        let ids: Vec<String> = p.records().iter().map(|r| r.id.clone()).collect();
        let plan = kfold_split(&ids, 5, 3).unwrap();
        let report = run_cv_experiment(&p, &plan, &[2, 3, 9]).unwrap();
        for method in Method::SELECTING {
            for size in [2, 3] {
                let pooled = report.pooled(method, size);
                assert_eq!(pooled.len(), 20);
                assert!(pooled.iter().all(|o| o.cer == 0.0));
            }
            assert!(report.pooled(method, 9).is_empty());
        }
    }
}
