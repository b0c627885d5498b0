//! The evaluation pipeline: gather transcriptions for every category pool,
//! then cross-validate the selection strategies on them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{build_grid, AugmentError, AugmentationSpec, Category};
use crate::metrics::{error_correlation, EvalOutcome};
use crate::model::{Dataset, FieldSet};
use crate::par::*;
use crate::rng;
use crate::selection::{
    kfold_split, run_cv_experiment, CandidatePool, CvReport, FoldPlan, Method, PoolRecord, SelectionError,
};
use crate::transcriber::{
    simulate_transcribe, GenerationParams, Job, NoiseModel, NoiseModelError, SimulatedTranscriber, TranscribeError,
    Transcriber,
};

/// Temperatures of the sampling-only categories.
pub const TEMPERATURES: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
/// Samples drawn per temperature category, matching the image grids.
pub const TEMPERATURE_SAMPLES: u32 = 20;
/// Downscale shared by the baseline and the temperature categories.
pub const BASE_SCALE: f64 = 0.5;
pub const BASELINE: &str = "baseline";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Noise(#[from] NoiseModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("transcription of {record} with {spec} failed: {source}")]
    Transcribe {
        record: String,
        spec: String,
        source: Box<TranscribeError>,
    },
    #[error("{missing} of {total} transcriptions are not cached\n{report}")]
    Coverage {
        missing: usize,
        total: usize,
        report: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Offline,
    Simulate,
}

impl FromStr for Mode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(Mode::Live),
            "offline" => Ok(Mode::Offline),
            "simulate" => Ok(Mode::Simulate),
            _ => Err(ExperimentError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Live => "live",
            Mode::Offline => "offline",
            Mode::Simulate => "simulate",
        })
    }
}

/// What varies inside one candidate pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolKind {
    /// The 20-point grid of an image category at temperature 0.
    Image(Category),
    /// Repeated samples of the downscaled original at one temperature.
    Temperature(f64),
}

impl PoolKind {
    pub fn name(&self) -> String {
        match self {
            PoolKind::Image(c) => c.slug().to_owned(),
            PoolKind::Temperature(t) => format!("temp-{t:.1}"),
        }
    }
}

impl FromStr for PoolKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        if let Some(t) = lower
            .strip_prefix("temp-")
            .or_else(|| lower.strip_prefix("temperature-"))
        {
            let t: f64 = t
                .parse()
                .map_err(|_| ExperimentError::Config(format!("bad temperature in {s:?}")))?;
            if !(t >= 0.0 && t.is_finite()) {
                return Err(ExperimentError::Config(format!("temperature must be >= 0 in {s:?}")));
            }
            return Ok(PoolKind::Temperature(t));
        }
        let category: Category = lower.parse()?;
        if category == Category::Identity {
            return Err(ExperimentError::Config(
                "identity has no grid; use a temp-<t> category".into(),
            ));
        }
        Ok(PoolKind::Image(category))
    }
}

/// One transcription source in a pool: an augmentation plus sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub key: String,
    pub spec: AugmentationSpec,
    pub params: GenerationParams,
}

pub fn pool_members(kind: PoolKind, model_name: &str) -> Result<Vec<Member>, ExperimentError> {
    Ok(match kind {
        PoolKind::Image(category) => build_grid(category)?
            .specs
            .into_iter()
            .map(|spec| Member {
                key: spec.hash(),
                spec,
                params: GenerationParams::new(model_name, 0.0),
            })
            .collect(),
        PoolKind::Temperature(t) => (0..TEMPERATURE_SAMPLES)
            .map(|i| Member {
                key: format!("sample-{i:02}"),
                spec: AugmentationSpec::identity(BASE_SCALE),
                params: GenerationParams::new(model_name, t).with_sample(i),
            })
            .collect(),
    })
}

pub fn baseline_member(model_name: &str) -> Member {
    Member {
        key: BASELINE.to_owned(),
        spec: AugmentationSpec::identity(BASE_SCALE),
        params: GenerationParams::new(model_name, 0.0),
    }
}

pub fn default_categories() -> Vec<String> {
    Category::IMAGE
        .iter()
        .map(|c| c.slug().to_owned())
        .chain(TEMPERATURES.iter().map(|&t| PoolKind::Temperature(t).name()))
        .collect()
}

fn default_k_folds() -> usize {
    5
}

fn default_sizes() -> Vec<usize> {
    vec![5, 10]
}

fn default_model_name() -> String {
    "default".to_owned()
}

/// Partial override of the noise model for one category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseOverride {
    #[serde(default)]
    pub char_error_rate: Option<f64>,
    #[serde(default)]
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub noise: NoiseModel,
    /// Keyed by category name.
    #[serde(default)]
    pub category_noise: BTreeMap<String, NoiseOverride>,
    /// Relative spread of the error rate across specs of a pool: each spec
    /// uses `eps * (1 + jitter * u)` with a spec-keyed `u` in [-1, 1].
    #[serde(default)]
    pub spec_jitter: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            noise: NoiseModel::new(0.1, 0.3, 0),
            category_noise: BTreeMap::new(),
            spec_jitter: 0.0,
        }
    }
}

impl SimulationConfig {
    /// The noise model of one category, bound to the run seed.
    pub fn model_for(&self, category: &str, run_seed: u64) -> Result<NoiseModel, ExperimentError> {
        let mut model = self.noise.clone();
        if let Some(o) = self.category_noise.get(category) {
            model.char_error_rate = o.char_error_rate.unwrap_or(model.char_error_rate);
            model.correlation = o.correlation.unwrap_or(model.correlation);
        }
        model.seed = rng::key(&[run_seed, model.seed]);
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_categories")]
    pub categories: Vec<String>,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_sizes")]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            categories: default_categories(),
            k_folds: default_k_folds(),
            ensemble_sizes: default_sizes(),
            seed: 0,
            model_name: default_model_name(),
            simulation: SimulationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn pool_kinds(&self) -> Result<Vec<PoolKind>, ExperimentError> {
        let mut kinds: Vec<PoolKind> = Vec::new();
        for name in &self.categories {
            let kind: PoolKind = name.parse()?;
            if !kinds.iter().any(|k| k.name() == kind.name()) {
                kinds.push(kind);
            }
        }
        Ok(kinds)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.k_folds < 2 {
            return Err(ExperimentError::Config("k_folds must be at least 2".into()));
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.contains(&0) {
            return Err(ExperimentError::Config("ensemble sizes must be positive".into()));
        }
        self.pool_kinds()?;
        Ok(())
    }

    /// Sorted, deduplicated ensemble sizes.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = self.ensemble_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    /// Number of transcriptions the run needs: records x pool members,
    /// plus one baseline query per record.
    pub fn planned_requests(&self, n_records: usize) -> Result<usize, ExperimentError> {
        let mut members = 1;
        for kind in self.pool_kinds()? {
            members += pool_members(kind, &self.model_name)?.len();
        }
        Ok(members * n_records)
    }
}

/// Simulated transcriber whose error rate varies per pool member.
#[derive(Debug, Clone)]
pub struct JitteredSimulator {
    pub model: NoiseModel,
    pub jitter: f64,
}

impl JitteredSimulator {
    pub fn error_rate(&self, job: &Job<'_>) -> f64 {
        if self.jitter == 0.0 {
            return self.model.char_error_rate;
        }
        let mut stream = rng::stream(&[self.model.seed, 0x717e, SimulatedTranscriber::sample_index(job)]);
        let u: f64 = rand::Rng::random_range(&mut stream, -1.0..=1.0);
        (self.model.char_error_rate * (1.0 + self.jitter * u)).clamp(0.0, 1.0)
    }
}

impl Transcriber for JitteredSimulator {
    fn transcribe(&self, job: &Job<'_>) -> Result<FieldSet, TranscribeError> {
        let mut model = self.model.for_record(job.record_id);
        model.char_error_rate = self.error_rate(job);
        Ok(simulate_transcribe(
            job.truth,
            &model,
            SimulatedTranscriber::sample_index(job),
        ))
    }
}

/// Where transcriptions come from.
pub enum Source<'a> {
    Simulate(&'a SimulationConfig),
    Transcriber(&'a dyn Transcriber),
}

struct Gathered {
    outputs: Vec<(String, Vec<FieldSet>)>,
    missing: Vec<(String, String)>,
}

fn gather(dataset: &Dataset, members: &[Member], transcriber: &dyn Transcriber) -> Result<Gathered, ExperimentError> {
    let n = dataset.records.len();
    let paths: Vec<_> = dataset.records.iter().map(|r| dataset.image_path(r)).collect();
    let results: Vec<Result<FieldSet, TranscribeError>> = (0..members.len() * n)
        .into_par_iter()
        .map(|i| {
            let (m, r) = (&members[i / n], i % n);
            let rec = &dataset.records[r];
            transcriber.transcribe(&Job {
                record_id: &rec.id,
                image_path: &paths[r],
                truth: &rec.truth,
                spec: &m.spec,
                params: &m.params,
            })
        })
        .collect();
    let mut outputs: Vec<(String, Vec<FieldSet>)> =
        members.iter().map(|m| (m.key.clone(), Vec::with_capacity(n))).collect();
    let mut missing = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        let (m, r) = (i / n, i % n);
        match res {
            Ok(fields) => outputs[m].1.push(fields),
            Err(TranscribeError::NotCached(_)) => {
                missing.push((dataset.records[r].id.clone(), members[m].key.clone()));
                outputs[m].1.push(FieldSet::new());
            }
            Err(source) => {
                return Err(ExperimentError::Transcribe {
                    record: dataset.records[r].id.clone(),
                    spec: members[m].key.clone(),
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(Gathered { outputs, missing })
}

#[derive(Debug, Clone)]
pub struct CategoryResult {
    pub name: String,
    pub pool_size: usize,
    pub cv: CvReport,
    /// Mean individual CER of the largest top-individual ensemble's members
    /// on the held-out folds.
    pub avg_member_cer: Option<f64>,
    /// Mean pairwise correlation of exact-match failures over all pool
    /// members; pairs with a constant vector are skipped.
    pub error_corr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub plan: FoldPlan,
    pub sizes: Vec<usize>,
    /// Baseline outcomes with the fold of their record.
    pub baseline: Vec<(usize, EvalOutcome)>,
    pub categories: Vec<CategoryResult>,
}

fn mean_error_correlation(pool: &CandidatePool) -> Result<Option<f64>, SelectionError> {
    let all = pool.all_records();
    let mut errors = Vec::with_capacity(pool.len());
    for key in pool.spec_keys() {
        errors.push(
            pool.individual_outcomes(key, &all)?
                .iter()
                .map(|o| !o.exact_match)
                .collect::<Vec<bool>>(),
        );
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..errors.len() {
        for j in i + 1..errors.len() {
            if let Ok(r) = error_correlation(&errors[i], &errors[j]) {
                sum += r;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

fn avg_member_cer(
    pool: &CandidatePool,
    cv: &CvReport,
    plan: &FoldPlan,
    max: usize,
) -> Result<Option<f64>, SelectionError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for eval in cv
        .evals
        .iter()
        .filter(|e| e.method == Method::TopIndividual && e.size == max)
    {
        let test: Vec<usize> = pool
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| plan.fold_of(&r.id) == Some(eval.fold))
            .map(|(i, _)| i)
            .collect();
        for key in &eval.selected {
            for o in pool.individual_outcomes(key, &test)? {
                sum += o.cer;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

fn fold_plan(dataset: &Dataset, config: &ExperimentConfig) -> Result<FoldPlan, ExperimentError> {
    let ids = dataset.ids();
    match dataset.fold_labels() {
        Some(labels) if labels.iter().all(|&l| l < config.k_folds) => {
            Ok(FoldPlan::from_labels(&ids, &labels, config.k_folds)?)
        }
        _ => Ok(kfold_split(&ids, config.k_folds, config.seed)?),
    }
}

/// Gathers every pool, then runs cross-validated selection per category.
///
/// Offline runs report every missing cache entry at once.
pub fn run_experiment(
    dataset: &Dataset,
    config: &ExperimentConfig,
    source: Source<'_>,
) -> Result<ExperimentResults, ExperimentError> {
    config.validate()?;
    let kinds = config.pool_kinds()?;
    let plan = fold_plan(dataset, config)?;
    let sizes = config.sizes();
    let records: Vec<PoolRecord> = dataset
        .records
        .iter()
        .map(|r| PoolRecord {
            id: r.id.clone(),
            truth: r.truth.clone(),
        })
        .collect();

    let mut pools: Vec<(String, Vec<Member>)> = vec![(BASELINE.to_owned(), vec![baseline_member(&config.model_name)])];
    for kind in &kinds {
        pools.push((kind.name(), pool_members(*kind, &config.model_name)?));
    }

    let mut gathered = Vec::with_capacity(pools.len());
    let mut coverage = Vec::new();
    let (mut missing, mut total) = (0, 0);
    for (name, members) in &pools {
        let g = match &source {
            Source::Simulate(sim) => {
                let model_name = if name == BASELINE { "identity" } else { name.as_str() };
                let simulator = JitteredSimulator {
                    model: sim.model_for(model_name, config.seed)?,
                    jitter: if name == BASELINE { 0.0 } else { sim.spec_jitter },
                };
                gather(dataset, members, &simulator)?
            }
            Source::Transcriber(t) => gather(dataset, members, *t)?,
        };
        let n = members.len() * dataset.records.len();
        total += n;
        missing += g.missing.len();
        coverage.push(format!("{name}: {}/{n} cached", n - g.missing.len()));
        for (rec, key) in g.missing.iter().take(5) {
            coverage.push(format!("  missing {rec} {key}"));
        }
        gathered.push(g.outputs);
    }
    if missing > 0 {
        return Err(ExperimentError::Coverage {
            missing,
            total,
            report: coverage.join("\n"),
        });
    }

    let mut gathered = gathered.into_iter();
    let baseline_pool = CandidatePool::new(records.clone(), gathered.next().unwrap_or_default())?;
    let baseline = baseline_pool
        .individual_outcomes(BASELINE, &baseline_pool.all_records())?
        .into_iter()
        .map(|o| (plan.fold_of(&o.record_id).unwrap_or(0), o))
        .collect();

    let mut categories = Vec::with_capacity(kinds.len());
    for ((name, members), outputs) in pools.iter().skip(1).zip(gathered) {
        log::info!("cross-validating {name} over {} members", members.len());
        let pool = CandidatePool::new(records.clone(), outputs)?;
        let cv = run_cv_experiment(&pool, &plan, &sizes)?;
        let max = sizes.iter().copied().filter(|&s| s <= pool.len()).max().unwrap_or(0);
        categories.push(CategoryResult {
            name: name.clone(),
            pool_size: pool.len(),
            avg_member_cer: avg_member_cer(&pool, &cv, &plan, max)?,
            error_corr: mean_error_correlation(&pool)?,
            cv,
        });
    }
    Ok(ExperimentResults {
        plan,
        sizes,
        baseline,
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_kind_names_round_trip() {
        for name in default_categories() {
            let kind: PoolKind = name.parse().unwrap();
            assert_eq!(kind.name(), name);
        }
        assert!("identity".parse::<PoolKind>().is_err());
        assert!("temp-x".parse::<PoolKind>().is_err());
        assert!("sharpen".parse::<PoolKind>().is_err());
    }

    #[test]
    fn members_have_unique_keys() {
        for name in default_categories() {
            let members = pool_members(name.parse().unwrap(), "m").unwrap();
            assert_eq!(members.len(), 20);
            let mut keys: Vec<_> = members.iter().map(|m| m.key.clone()).collect();
            keys.sort();
            keys.dedup();
            assert_eq!(keys.len(), 20, "{name}");
        }
    }

    #[test]
    fn planned_requests_counts_every_member() {
        let config = ExperimentConfig {
            categories: vec!["pad".into(), "temp-1.0".into()],
            ..Default::default()
        };
        assert_eq!(config.planned_requests(7).unwrap(), 7 * 41);
    }

    #[test]
    fn config_defaults_from_empty_json() {
        let config: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.categories.len(), 9);
    }

    #[test]
    fn category_override_applies() {
        let mut sim = SimulationConfig::default();
        sim.category_noise.insert(
            "pad".into(),
            NoiseOverride {
                char_error_rate: Some(0.3),
                correlation: None,
            },
        );
        let m = sim.model_for("pad", 1).unwrap();
        assert_eq!((m.char_error_rate, m.correlation), (0.3, 0.3));
        assert_eq!(sim.model_for("resize", 1).unwrap().char_error_rate, 0.1);
    }
}
