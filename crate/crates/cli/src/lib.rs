//! Experiment runner behind the `rfdiss` binary.
//!
//! A run is described by a [`RunConfig`], which can be read from a
//! `key = value` file and overridden key by key from the command line. The
//! `run_metadata.txt` written next to the reports uses the same format, so
//! `rfdiss run --config <out>/run_metadata.txt` repeats a run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rfdiss::dataset::{self, DatasetError, MultiViewDataset};
use rfdiss::dissimilarity::{self, DissimilarityMatrix};
use rfdiss::evaluation::{self, AccuracyTable, EvaluationReport, ProtocolRun, ALPHAS};
use rfdiss::forest::{Forest, ForestConfig};
use rfdiss::pipelines::{MethodId, PipelineConfig};
use rfdiss::{seed, synth, KernelGrid};
use thiserror::Error;

pub const RAW_CSV: &str = "raw_accuracies.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SIGN_TEST_CSV: &str = "sign_test.csv";
pub const DETAILS_CSV: &str = "method_details.csv";
pub const METADATA: &str = "run_metadata.txt";
pub const INCOMPLETE: &str = "INCOMPLETE";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset {source_name}: {error}")]
    Dataset { source_name: String, error: DatasetError },
    #[error("validation failed for {source_name}:\n{}", list(.errors))]
    Validation {
        source_name: String,
        errors: Vec<DatasetError>,
    },
    #[error("{stage}: {message}")]
    Runtime { stage: String, message: String },
    #[error("writing {path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
}

fn list(errors: &[DatasetError]) -> String {
    errors.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    /// 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Dataset { .. } | CliError::Validation { .. } => 1,
            CliError::Runtime { .. } | CliError::Io { .. } => 2,
        }
    }

    fn runtime(stage: impl Into<String>, err: impl std::fmt::Display) -> Self {
        CliError::Runtime {
            stage: stage.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |error| CliError::Io {
        path: path.to_path_buf(),
        error,
    }
}

/// Where a dataset comes from: a manifest path, or `synth:<preset>[:<seed>]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic { preset: String, seed: u64 },
}

impl DatasetSource {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let Some(rest) = text.strip_prefix("synth:") else {
            return Ok(DatasetSource::Manifest(PathBuf::from(text)));
        };
        let (preset, seed) = match rest.split_once(':') {
            Some((p, s)) => (
                p,
                s.parse()
                    .map_err(|_| CliError::Config(format!("bad seed in dataset `{text}`")))?,
            ),
            None => (rest, 0),
        };
        if !synth::PRESETS.contains(&preset) {
            return Err(CliError::Config(format!(
                "unknown synthetic preset `{preset}` (known: {})",
                synth::PRESETS.join(", ")
            )));
        }
        Ok(DatasetSource::Synthetic {
            preset: preset.to_string(),
            seed,
        })
    }

    pub fn load(&self) -> Result<MultiViewDataset> {
        match self {
            DatasetSource::Manifest(path) => dataset::load_dataset(path).map_err(|error| CliError::Dataset {
                source_name: self.to_string(),
                error,
            }),
            DatasetSource::Synthetic { preset, seed } => {
                let ds = synth::preset(preset, *seed).expect("preset checked at parse time");
                // keep names distinct across seeds
                MultiViewDataset::new(
                    format!("{preset}_s{seed}"),
                    ds.views().to_vec(),
                    ds.labels().to_vec(),
                    ds.class_names().to_vec(),
                )
                .map_err(|error| CliError::Dataset {
                    source_name: self.to_string(),
                    error,
                })
            }
        }
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSource::Manifest(p) => write!(f, "{}", p.display()),
            DatasetSource::Synthetic { preset, seed } => write!(f, "synth:{preset}:{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub datasets: Vec<DatasetSource>,
    pub methods: Vec<MethodId>,
    pub repetitions: usize,
    pub train_fraction: f64,
    pub num_trees: usize,
    pub c_grid: Vec<f64>,
    pub relief_k: usize,
    pub bootstrap: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; `None` lets rayon decide.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            methods: MethodId::ALL.to_vec(),
            repetitions: 10,
            train_fraction: 0.5,
            num_trees: 500,
            c_grid: KernelGrid::default().values().to_vec(),
            relief_k: 10,
            bootstrap: true,
            seed: 0,
            output_dir: PathBuf::from("rfdiss-out"),
            jobs: None,
        }
    }
}

/// Keys understood by [`RunConfig::set`]; they match the long flag names.
pub const CONFIG_KEYS: [&str; 11] = [
    "datasets",
    "methods",
    "repeats",
    "train-fraction",
    "trees",
    "c-grid",
    "relief-k",
    "bootstrap",
    "seed",
    "out",
    "jobs",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("bad value `{value}` for `{key}`")))
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "datasets" | "dataset" => {
                self.datasets = split_list(value).map(DatasetSource::parse).collect::<Result<_>>()?;
            }
            "methods" => {
                self.methods = split_list(value)
                    .map(|m| m.parse::<MethodId>().map_err(CliError::Config))
                    .collect::<Result<_>>()?;
            }
            "repeats" => self.repetitions = parse_value(key, value)?,
            "train-fraction" => self.train_fraction = parse_value(key, value)?,
            "trees" => self.num_trees = parse_value(key, value)?,
            "c-grid" => {
                self.c_grid = split_list(value).map(|c| parse_value(key, c)).collect::<Result<_>>()?;
            }
            "relief-k" => self.relief_k = parse_value(key, value)?,
            "bootstrap" => self.bootstrap = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "out" => self.output_dir = PathBuf::from(value.trim()),
            "jobs" => {
                self.jobs = match value.trim() {
                    "" | "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    /// The `key = value` form read back by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let join = |items: Vec<String>| items.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "datasets = {}", join(self.datasets.iter().map(|d| d.to_string()).collect()));
        let _ = writeln!(s, "methods = {}", join(self.methods.iter().map(|m| m.to_string()).collect()));
        let _ = writeln!(s, "repeats = {}", self.repetitions);
        let _ = writeln!(s, "train-fraction = {}", self.train_fraction);
        let _ = writeln!(s, "trees = {}", self.num_trees);
        let _ = writeln!(s, "c-grid = {}", join(self.c_grid.iter().map(|c| c.to_string()).collect()));
        let _ = writeln!(s, "relief-k = {}", self.relief_k);
        let _ = writeln!(s, "bootstrap = {}", self.bootstrap);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.output_dir.display());
        let _ = writeln!(s, "jobs = {}", self.jobs.map_or("auto".to_string(), |j| j.to_string()));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.datasets.is_empty() {
            return bad("no datasets given");
        }
        if self.methods.is_empty() {
            return bad("no methods given");
        }
        if self.repetitions == 0 || self.num_trees == 0 || self.relief_k == 0 {
            return bad("repeats, trees and relief-k must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train-fraction must lie strictly between 0 and 1");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        KernelGrid::new(self.c_grid.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            forest: self.forest_config(),
            c_grid: KernelGrid::new(self.c_grid.clone()).map_err(|e| CliError::Config(e.to_string()))?,
            relief_k: self.relief_k,
            seed: self.seed,
        })
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            num_trees: self.num_trees,
            bootstrap: self.bootstrap,
            seed: self.seed,
            ..ForestConfig::default()
        }
    }
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::runtime("thread pool", e))?;
            Ok(pool.install(f))
        }
    }
}

/// Fixed choices that shape every run, echoed into the metadata file.
pub const DESIGN_CHOICES: [&str; 10] = [
    "forest: gini CART grown to purity, mtry = ceil(sqrt(p)), bootstrap of N draws, midpoint thresholds",
    "forest: zero-gain splits allowed; all-constant candidates retried once with a fresh subset",
    "dissimilarity: per-view forests trained once per split and shared by rfsvm, rfdis, late_rf, late_rfdis",
    "svm: pairwise dual solver, tolerance 1e-3, one-vs-one, vote ties to the lowest class",
    "svm: C chosen per split by stratified 3-fold CV on training rows (2-fold for classes under 3), ties to the smallest C",
    "relieff: L1 on min-max scaled features, k clamped to smallest training class - 1",
    "svm-rfe: standardized features, linear kernel C = 1, score sum |w| over one-vs-one pairs, halve per round",
    "late integration: hard plurality vote, ties to the lowest class",
    "sign test: ties split evenly with the odd tie dropped; exact binomial critical value decides",
    "seeds: every component seed derives from (seed, dataset name, repetition, component tag)",
];

pub fn metadata_text(config: &RunConfig, datasets: &[MultiViewDataset]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# rfdiss-cli {} / rfdiss {}", env!("CARGO_PKG_VERSION"), rfdiss::VERSION);
    for d in DESIGN_CHOICES {
        let _ = writeln!(s, "# choice: {d}");
    }
    for ds in datasets {
        let first = ds.shape_report().to_string();
        let _ = writeln!(s, "# dataset {}: {}", ds.name(), first.lines().next().unwrap_or(""));
    }
    s.push_str(&config.to_text());
    s
}

fn dataset_seed(seed_value: u64, name: &str, what: &str) -> u64 {
    seed::derive_tagged(seed_value, &format!("{what}:{name}"), 0)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), String>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(|m| CliError::runtime(format!("writing {}", path.display()), m))?;
    fs::write(path, buf).map_err(io_err(path))
}

fn write_details(path: &Path, runs: &[(String, ProtocolRun)]) -> Result<()> {
    write_file(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut rows = vec![vec![
            "dataset".to_string(),
            "repetition".into(),
            "method".into(),
            "accuracy".into(),
            "chosen_c".into(),
            "selected_features".into(),
            "shared_view_forests".into(),
            "representation_width".into(),
        ]];
        for (name, run) in runs {
            for (rep, row) in run.results.iter().enumerate() {
                for r in row {
                    let m = &r.metadata;
                    rows.push(vec![
                        name.clone(),
                        rep.to_string(),
                        r.method.to_string(),
                        r.accuracy.to_string(),
                        m.chosen_c.map_or_else(String::new, |c| c.to_string()),
                        m.selected_features
                            .as_ref()
                            .map_or_else(String::new, |f| f.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")),
                        m.shared_view_forests.to_string(),
                        m.representation_width.to_string(),
                    ]);
                }
            }
        }
        for r in rows {
            w.write_record(&r).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    })
}

/// What a successful run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvaluationReport,
    pub files: Vec<PathBuf>,
}

/// Executes the protocol on every dataset and writes the reports. On
/// failure an `INCOMPLETE` file in the output directory names the stage.
pub fn cmd_run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let marker = out.join(INCOMPLETE);
    fs::write(&marker, "run in progress\n").map_err(io_err(&marker))?;
    match run_inner(config) {
        Ok(outcome) => {
            fs::remove_file(&marker).map_err(io_err(&marker))?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("run failed: {e}\n"));
            Err(e)
        }
    }
}

fn run_inner(config: &RunConfig) -> Result<RunOutcome> {
    let out = &config.output_dir;
    let datasets = config.datasets.iter().map(DatasetSource::load).collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = datasets.iter().map(|d| d.name()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config("dataset names must be distinct".into()));
    }
    let base = config.pipeline_config()?;
    let mut files = Vec::new();
    let mut runs: Vec<(String, ProtocolRun)> = Vec::new();
    for ds in &datasets {
        let name = ds.name().to_string();
        let plan = dataset::make_split_plan(
            ds,
            config.repetitions,
            config.train_fraction,
            dataset_seed(config.seed, &name, "split"),
        )
        .map_err(|error| CliError::Dataset {
            source_name: name.clone(),
            error,
        })?;
        let pipeline = base.with_seed(dataset_seed(config.seed, &name, "pipeline"));
        let run = with_jobs(config.jobs, || evaluation::run_protocol(ds, &config.methods, &plan, &pipeline))?
            .map_err(|e| CliError::runtime(format!("dataset {name}"), e))?;

        let splits = out.join(format!("splits_{}.csv", file_stem(&name)));
        write_file(&splits, |b| plan.write_csv(b).map_err(|e| e.to_string()))?;
        let preds = out.join(format!("predictions_{}.csv", file_stem(&name)));
        write_file(&preds, |b| {
            evaluation::write_predictions_csv(b, ds, &plan, &run).map_err(|e| e.to_string())
        })?;
        files.extend([splits, preds]);
        runs.push((name, run));
    }

    let tables: Vec<AccuracyTable> = runs.iter().map(|(_, r)| r.table.clone()).collect();
    let report = EvaluationReport::build(tables, &ALPHAS).map_err(|e| CliError::runtime("statistics", e))?;

    let raw = out.join(RAW_CSV);
    write_file(&raw, |b| evaluation::write_raw_csv(b, &report.tables).map_err(|e| e.to_string()))?;
    let summary = out.join(SUMMARY_CSV);
    write_file(&summary, |b| evaluation::write_summary_csv(b, &report).map_err(|e| e.to_string()))?;
    let sign = out.join(SIGN_TEST_CSV);
    write_file(&sign, |b| {
        evaluation::write_sign_test_csv(b, &report.sign_tests).map_err(|e| e.to_string())
    })?;
    let details = out.join(DETAILS_CSV);
    write_details(&details, &runs)?;
    let meta = out.join(METADATA);
    fs::write(&meta, metadata_text(config, &datasets)).map_err(io_err(&meta))?;
    files.extend([raw, summary, sign, details, meta]);
    Ok(RunOutcome { report, files })
}

/// Human-readable table of a report, one line per dataset.
pub fn format_report(report: &EvaluationReport) -> String {
    let methods = &report.tables[0].methods;
    let mut s = String::new();
    let _ = write!(s, "{:<20}", "dataset");
    for m in methods {
        let _ = write!(s, " {:>16}", m.label());
    }
    s.push('\n');
    for (t, summary) in report.tables.iter().zip(&report.summaries) {
        let _ = write!(s, "{:<20}", t.dataset);
        for cell in summary {
            let _ = write!(s, " {:>16}", cell.cell());
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<20}", "average rank");
    for r in &report.average_ranks {
        let _ = write!(s, " {:>16.2}", r);
    }
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimConfig {
    pub dataset: DatasetSource,
    pub view: Option<String>,
    pub output_dir: PathBuf,
    pub num_trees: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

/// Trains one forest per view on all instances and writes the per-view
/// and joint dissimilarity matrices. Returns the written paths.
pub fn cmd_dissim(config: &DissimConfig) -> Result<Vec<PathBuf>> {
    if config.num_trees == 0 {
        return Err(CliError::Config("trees must be positive".into()));
    }
    let ds = config.dataset.load()?;
    let selected: Vec<usize> = match &config.view {
        None => (0..ds.num_views()).collect(),
        Some(name) => match ds.views().iter().position(|v| v.name() == name) {
            Some(q) => vec![q],
            None => {
                let known: Vec<&str> = ds.views().iter().map(|v| v.name()).collect();
                return Err(CliError::Config(format!(
                    "unknown view `{name}` (views: {})",
                    known.join(", ")
                )));
            }
        },
    };
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let ids: Vec<usize> = (0..ds.num_instances()).collect();
    let base = ForestConfig {
        num_trees: config.num_trees,
        bootstrap: config.bootstrap,
        ..ForestConfig::default()
    };
    let mut matrices: Vec<DissimilarityMatrix> = Vec::new();
    let mut files = Vec::new();
    for &q in &selected {
        let view = &ds.views()[q];
        let cfg = base.with_seed(seed::derive_tagged(config.seed, "view-forest", q as u64));
        let forest = Forest::train(view.features(), ds.labels(), ds.num_classes(), &cfg)
            .map_err(|e| CliError::runtime(format!("forest for view {}", view.name()), e))?;
        let d = dissimilarity::build_square(&forest, view.features(), &ids)
            .map_err(|e| CliError::runtime("dissimilarity", e))?;
        let path = out.join(format!("dissim_view{q}_{}.csv", file_stem(view.name())));
        write_file(&path, |b| d.write_csv(b).map_err(|e| e.to_string()))?;
        files.push(path);
        matrices.push(d);
    }
    let joint = dissimilarity::joint_average(&matrices).map_err(|e| CliError::runtime("joint matrix", e))?;
    let path = out.join("dissim_joint.csv");
    write_file(&path, |b| joint.write_csv(b).map_err(|e| e.to_string()))?;
    files.push(path);
    Ok(files)
}

/// Runs every ingestion check; on success returns the printed shape report.
pub fn cmd_validate(source: &DatasetSource) -> Result<String> {
    match source {
        DatasetSource::Manifest(path) => match dataset::validate_manifest(path) {
            Ok(report) => Ok(report.to_string()),
            Err(errors) => Err(CliError::Validation {
                source_name: source.to_string(),
                errors,
            }),
        },
        DatasetSource::Synthetic { .. } => Ok(source.load()?.shape_report().to_string()),
    }
}

/// Writes a synthetic preset as manifest + CSVs.
pub fn cmd_synth(preset: &str, seed_value: u64, out: &Path) -> Result<PathBuf> {
    let source = DatasetSource::parse(&format!("synth:{preset}:{seed_value}"))?;
    let ds = source.load()?;
    dataset::write_dataset(&ds, out).map_err(|error| CliError::Dataset {
        source_name: source.to_string(),
        error,
    })
}
