//! Command-line surface of the toolkit. Each subcommand is a plain function
//! so the test suite can drive it without spawning a process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use tta_core::augment::{apply_augmentation, build_grid, Category};
use tta_core::experiment::{run_experiment, ExperimentConfig, ExperimentError, Mode, Source};
use tta_core::model::{load_dataset, Dataset, DocumentImage};
use tta_core::par::{with_threads, IntoParallelRefIterator, ParallelIterator};
use tta_core::report::{aggregate_reports, write_reports, write_sweep, OUTCOMES};
use tta_core::synth::{generate_synthetic_dataset, DEFAULT_LEXICON};
use tta_core::theory::sweep;
use tta_core::transcriber::{
    default_prompt_ref, now_millis, Cache, EndpointConfig, OfflineTranscriber, RemoteClient, RemoteTranscriber,
};

pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum CliError {
    /// Offline run with transcriptions missing from the cache.
    #[error("incomplete transcription coverage ({missing} of {total} missing); see {}", report.display())]
    Incomplete {
        missing: usize,
        total: usize,
        report: PathBuf,
    },
    #[error("output {out} lies inside the dataset directory {dataset}; refusing to write there")]
    OutputInDataset { out: PathBuf, dataset: PathBuf },
}

#[derive(Debug, Parser)]
#[command(
    name = "tta",
    version,
    about = "Test-time augmentation ensembles for document transcription"
)]
pub struct Cli {
    /// Log filter, e.g. `info` or `tta_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (rendered name pages plus manifest).
    Synth(SynthArgs),
    /// Render the augmentation grids of every record to PNG.
    Augment(AugmentArgs),
    /// Transcribe, fuse, select and write the report tables.
    Run(RunArgs),
    /// Aggregate an existing outcomes table into figure series.
    Report(ReportArgs),
    /// Monte-Carlo sweep of correlated majority voting.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub records: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Newline-separated names to draw from instead of the built-in list.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image categories; all five when omitted.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub parallelism: usize,
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON run configuration, or a previous run's `run-manifest.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON list of records).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// live, offline (cache only) or simulate.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Comma-separated pools, e.g. `pad,grid-warp,temp-1.0`; all by default.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub ensemble_sizes: Vec<usize>,
    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (and so concurrent requests); 0 uses every core.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Print the planned request count and stop.
    #[arg(long)]
    pub dry_run: bool,
    /// Transcription cache (JSONL); defaults to `<out>/cache/transcriptions.jsonl`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Remote endpoint URL for live mode.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent with each request and recorded in cache keys.
    #[arg(long)]
    pub model: Option<String>,
    /// Simulated per-character error rate.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Simulated copula correlation.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Simulated probability that a field is omitted.
    #[arg(long)]
    pub drop_rate: Option<f64>,
    /// Relative spread of the error rate across simulated specs.
    #[arg(long)]
    pub spec_jitter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a previous run, or an outcomes CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
    /// Defaults to the directory holding the outcomes table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3])]
    pub epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.7])]
    pub rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21])]
    pub ns: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub parallelism: usize,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let ds = cmd_synth(&args)?;
            println!("wrote {} records to {}", ds.len(), ds.root.display());
        }
        Command::Augment(args) => {
            let s = cmd_augment(&args)?;
            println!("{} images written, {} already present", s.written, s.skipped);
        }
        Command::Run(args) => {
            let config = RunConfig::resolve(&args)?;
            match cmd_run(&config, args.dry_run)? {
                RunOutcome::Planned {
                    requests,
                    records,
                    members,
                } => {
                    println!("planned requests: {requests} ({records} records x {members} pool members)")
                }
                RunOutcome::Done { files } => {
                    for f in files {
                        println!("{}", f.display());
                    }
                }
            }
        }
        Command::Report(args) => {
            for f in cmd_report(&args)? {
                println!("{}", f.display());
            }
        }
        Command::Simulate(args) => cmd_simulate(&args)?,
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Dataset> {
    let lexicon: Vec<String> = match &args.lexicon {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("reading lexicon {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        None => DEFAULT_LEXICON.iter().map(|s| s.to_string()).collect(),
    };
    Ok(generate_synthetic_dataset(
        &args.out,
        args.records,
        &lexicon,
        args.seed,
    )?)
}

fn guard_output(out: &Path, dataset: &Dataset) -> Result<()> {
    let root = fs::canonicalize(&dataset.root).unwrap_or_else(|_| dataset.root.clone());
    // The output may not exist yet; resolve its nearest existing ancestor.
    let mut probe = out.to_path_buf();
    let mut tail = Vec::new();
    let resolved = loop {
        if let Ok(c) = fs::canonicalize(&probe) {
            break tail.into_iter().rev().fold(c, |acc: PathBuf, part| acc.join(part));
        }
        match (probe.parent(), probe.file_name()) {
            (Some(parent), Some(name)) => {
                tail.push(name.to_owned());
                probe = if parent.as_os_str().is_empty() {
                    PathBuf::from(".")
                } else {
                    parent.to_path_buf()
                };
            }
            _ => break out.to_path_buf(),
        }
    };
    if resolved.starts_with(&root) {
        return Err(CliError::OutputInDataset {
            out: out.to_path_buf(),
            dataset: root,
        }
        .into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentSummary {
    pub written: usize,
    pub skipped: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    category: String,
    spec: serde_json::Value,
}

pub fn cmd_augment(args: &AugmentArgs) -> Result<AugmentSummary> {
    let dataset = load_dataset(&args.manifest)?;
    guard_output(&args.out, &dataset)?;
    let categories: Vec<Category> = if args.categories.is_empty() {
        Category::IMAGE.to_vec()
    } else {
        args.categories.iter().map(|c| c.parse()).collect::<Result<_, _>>()?
    };
    let mut specs = Vec::new();
    for c in categories {
        specs.extend(build_grid(c)?.specs);
    }
    let root = args.out.join("cache").join("aug");
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;

    let counts: Vec<Result<(usize, usize)>> = with_threads(args.parallelism, || {
        dataset
            .records
            .par_iter()
            .map(|rec| {
                let dir = root.join(&rec.id);
                let todo: Vec<_> = specs
                    .iter()
                    .filter(|s| !dir.join(format!("{}.png", s.hash())).is_file())
                    .collect();
                if todo.is_empty() {
                    return Ok((0, specs.len()));
                }
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let page = DocumentImage::load(rec.id.clone(), &dataset.image_path(rec))?;
                for spec in &todo {
                    let png = apply_augmentation(&page, spec)
                        .with_context(|| format!("augmenting {} with {spec}", rec.id))?
                        .to_png()?;
                    let path = dir.join(format!("{}.png", spec.hash()));
                    fs::write(&path, png).with_context(|| format!("writing {}", path.display()))?;
                }
                Ok((todo.len(), specs.len() - todo.len()))
            })
            .collect()
    });
    let mut summary = AugmentSummary { written: 0, skipped: 0 };
    for c in counts {
        let (w, s) = c?;
        summary.written += w;
        summary.skipped += s;
    }

    let index_path = root.join("index.json");
    let mut index: BTreeMap<String, IndexEntry> = match fs::read_to_string(&index_path) {
        Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", index_path.display()))?,
        Err(_) => BTreeMap::new(),
    };
    for spec in &specs {
        index.insert(
            spec.hash(),
            IndexEntry {
                category: spec.category().slug().to_owned(),
                spec: serde_json::from_str(&spec.canonical_json())?,
            },
        );
    }
    fs::write(&index_path, serde_json::to_string_pretty(&index)? + "\n")
        .with_context(|| format!("writing {}", index_path.display()))?;
    Ok(summary)
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs. Serialized verbatim into the run manifest; the
/// API credential is never part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub mode: Mode,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub parallelism: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl RunConfig {
    /// Layers command-line flags over an optional config file.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let file: Option<RunConfig> = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                // A run manifest nests the configuration under "config".
                let value = match value.get("config") {
                    Some(inner) if value.get("input_hashes").is_some() => inner.clone(),
                    _ => value,
                };
                Some(serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?)
            }
            None => None,
        };
        let manifest = match (&args.manifest, &file) {
            (Some(m), _) => m.clone(),
            (None, Some(f)) => f.manifest.clone(),
            (None, None) => bail!("--manifest is required"),
        };
        let mode = args.mode.or(file.as_ref().map(|f| f.mode)).unwrap_or(Mode::Simulate);
        let mut config = file.unwrap_or(RunConfig {
            manifest: manifest.clone(),
            mode,
            seed: None,
            experiment: ExperimentConfig::default(),
            endpoint: None,
            cache: None,
            parallelism: 0,
            out: default_out(),
        });
        config.manifest = manifest;
        config.mode = mode;
        config.seed = args.seed.or(config.seed);
        let exp = &mut config.experiment;
        if !args.categories.is_empty() {
            exp.categories = args.categories.clone();
        }
        if !args.ensemble_sizes.is_empty() {
            exp.ensemble_sizes = args.ensemble_sizes.clone();
        }
        if let Some(k) = args.k_folds {
            exp.k_folds = k;
        }
        if let Some(m) = &args.model {
            exp.model_name = m.clone();
        }
        let noise = &mut exp.simulation.noise;
        if let Some(e) = args.epsilon {
            noise.char_error_rate = e;
        }
        if let Some(r) = args.rho {
            noise.correlation = r;
        }
        if let Some(d) = args.drop_rate {
            noise.drop_field_rate = d;
        }
        if let Some(j) = args.spec_jitter {
            exp.simulation.spec_jitter = j;
        }
        if let Some(url) = &args.endpoint {
            let model = exp.model_name.clone();
            config.endpoint = Some(match config.endpoint.take() {
                Some(mut e) => {
                    e.url = url.clone();
                    e
                }
                None => EndpointConfig::new(url.clone(), model),
            });
        }
        if let Some(e) = config.endpoint.as_mut() {
            e.model = config.experiment.model_name.clone();
        }
        if let Some(c) = &args.cache {
            config.cache = Some(c.clone());
        }
        if let Some(p) = args.parallelism {
            config.parallelism = p;
        }
        if let Some(o) = &args.out {
            config.out = o.clone();
        }
        Ok(config.normalized())
    }

    /// Copy with the top-level seed propagated into the experiment.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.experiment.seed = c.seed.unwrap_or(0);
        c
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.out.join("cache").join("transcriptions.jsonl"))
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        match self.mode {
            Mode::Simulate if self.seed.is_none() => bail!("simulate mode needs --seed"),
            Mode::Live if self.endpoint.is_none() => bail!("live mode needs --endpoint or an endpoint in the config"),
            _ => Ok(()),
        }
    }

    /// Short content hash of the canonical configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Planned {
        requests: usize,
        records: usize,
        members: usize,
    },
    Done {
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Path (relative to the dataset root for images) to git-style SHA-256 blob hash.
    pub input_hashes: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    /// Unix milliseconds.
    pub started: u64,
    pub finished: u64,
}

/// Hash of `"blob <len>\0" + content`, the object naming of a SHA-256 git
/// repository.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn input_hashes(config: &RunConfig, dataset: &Dataset) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let read = |p: &Path| fs::read(p).with_context(|| format!("hashing {}", p.display()));
    out.insert("manifest".to_owned(), blob_hash(&read(&config.manifest)?));
    for rec in &dataset.records {
        out.insert(
            rec.image.display().to_string(),
            blob_hash(&read(&dataset.image_path(rec))?),
        );
    }
    Ok(out)
}

pub fn cmd_run(config: &RunConfig, dry_run: bool) -> Result<RunOutcome> {
    let config = &config.normalized();
    config.experiment.validate()?;
    let started = now_millis();
    let dataset = load_dataset(&config.manifest)?;
    let requests = config.experiment.planned_requests(dataset.len())?;
    if dry_run {
        return Ok(RunOutcome::Planned {
            requests,
            records: dataset.len(),
            members: requests / dataset.len().max(1),
        });
    }
    config.validate()?;
    guard_output(&config.out, &dataset)?;
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;

    let result = match config.mode {
        Mode::Simulate => with_threads(config.parallelism, || {
            run_experiment(
                &dataset,
                &config.experiment,
                Source::Simulate(&config.experiment.simulation),
            )
        }),
        Mode::Offline => {
            let cache = Arc::new(Cache::open(&config.cache_path())?);
            let t = OfflineTranscriber { cache };
            with_threads(config.parallelism, || {
                run_experiment(&dataset, &config.experiment, Source::Transcriber(&t))
            })
        }
        Mode::Live => {
            let endpoint = config.endpoint.clone().context("live mode needs an endpoint")?;
            let cache_path = config.cache_path();
            if let Some(parent) = cache_path.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            let cache = Arc::new(Cache::open(&cache_path)?);
            let t = RemoteTranscriber {
                client: RemoteClient::from_env(endpoint)?,
                cache: Arc::clone(&cache),
            };
            let r = with_threads(config.parallelism, || {
                run_experiment(&dataset, &config.experiment, Source::Transcriber(&t))
            });
            cache.maybe_compact()?;
            r
        }
    };
    let results = match result {
        Err(ExperimentError::Coverage { missing, total, report }) => {
            let path = config.out.join("coverage.txt");
            fs::write(&path, format!("{report}\n")).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("{report}");
            return Err(CliError::Incomplete {
                missing,
                total,
                report: path,
            }
            .into());
        }
        other => other?,
    };
    let files = write_reports(&results, &config.out.join(REPORT_DIR))?;

    let mut versions = BTreeMap::new();
    versions.insert("tta".to_owned(), env!("CARGO_PKG_VERSION").to_owned());
    versions.insert("prompt".to_owned(), default_prompt_ref());
    let manifest = RunManifest {
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        input_hashes: input_hashes(config, &dataset)?,
        versions,
        started,
        finished: now_millis(),
    };
    let path = config.out.join(RUN_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    let mut files = files;
    files.push(path);
    Ok(RunOutcome::Done { files })
}

pub fn cmd_report(args: &ReportArgs) -> Result<Vec<PathBuf>> {
    let outcomes = if args.input.is_dir() {
        let nested = args.input.join(REPORT_DIR).join(OUTCOMES);
        if nested.is_file() {
            nested
        } else {
            args.input.join(OUTCOMES)
        }
    } else {
        args.input.clone()
    };
    let out = match &args.out {
        Some(o) => o.clone(),
        None => outcomes.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(aggregate_reports(&outcomes, &args.categories, &out)?)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    if args.trials == 0 || args.ns.contains(&0) {
        bail!("trials and ensemble sizes must be positive");
    }
    if let Some(&e) = args.epsilons.iter().find(|e| !(0.0..0.5).contains(*e)) {
        bail!("epsilon {e} outside [0, 0.5)");
    }
    if let Some(&r) = args.rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        bail!("rho {r} outside [0, 1]");
    }
    let rows = with_threads(args.parallelism, || {
        sweep(&args.epsilons, &args.rhos, &args.ns, args.trials, args.seed)
    });
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_sweep(&rows, file)?;
        }
        None => write_sweep(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}
