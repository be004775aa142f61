//! Multi-view datasets: the in-memory model, manifest/CSV ingestion and
//! export, view concatenation and stratified repeated splitting.
//!
//! A dataset on disk is a manifest file plus one CSV per view and one CSV of
//! labels:
//!
//! ```text
//! # comments and blank lines are ignored
//! name = lsvt
//! labels = labels.csv
//! view.phys = phys.csv
//! view.mfcc = mfcc.csv
//! ```
//!
//! Paths are relative to the manifest's directory. View CSVs carry a header
//! row of feature names; the labels CSV has a single `label` column. Views
//! keep the order in which they appear in the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: row {row}, column '{column}': {message}")]
    Cell {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },
    #[error("view '{view}' has {found} rows but the labels have {expected}")]
    RowCountMismatch {
        view: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate view name '{0}'")]
    DuplicateView(String),
    #[error("dataset needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("dataset needs at least one view")]
    NoViews,
    #[error("view '{0}' has no feature columns")]
    EmptyView(String),
    #[error("view '{view}': {names} feature names for {columns} columns")]
    FeatureNameCount {
        view: String,
        names: usize,
        columns: usize,
    },
    #[error("view '{view}' contains a non-finite value at row {row}, column {column}")]
    NonFinite {
        view: String,
        row: usize,
        column: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("at least one repetition is required")]
    NoRepetitions,
    #[error("class '{class}' has {count} member(s); stratified splitting needs at least 2")]
    ClassTooSmall { class: String, count: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One feature group describing every instance of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    name: String,
    features: Array2<f64>,
    feature_names: Vec<String>,
}

impl View {
    pub fn new(name: impl Into<String>, features: Array2<f64>, feature_names: Vec<String>) -> Result<Self> {
        let name = name.into();
        if features.ncols() == 0 {
            return Err(DatasetError::EmptyView(name));
        }
        if feature_names.len() != features.ncols() {
            return Err(DatasetError::FeatureNameCount {
                view: name,
                names: feature_names.len(),
                columns: features.ncols(),
            });
        }
        if let Some(((row, column), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DatasetError::NonFinite { view: name, row, column });
        }
        Ok(Self {
            name,
            features,
            feature_names,
        })
    }

    /// Builds a view with generated feature names `f0, f1, ...`.
    pub fn unnamed(name: impl Into<String>, features: Array2<f64>) -> Result<Self> {
        let names = (0..features.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(name, features, names)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn num_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    /// Copies the given rows, in the given order.
    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }
}

/// `N` labelled instances described by `Q` views.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    name: String,
    views: Vec<View>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<View>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(DatasetError::NoViews);
        }
        let mut seen = HashSet::new();
        for v in &views {
            if !seen.insert(v.name.as_str()) {
                return Err(DatasetError::DuplicateView(v.name.clone()));
            }
            if v.num_rows() != labels.len() {
                return Err(DatasetError::RowCountMismatch {
                    view: v.name.clone(),
                    expected: labels.len(),
                    found: v.num_rows(),
                });
            }
        }
        if class_names.len() < 2 {
            return Err(DatasetError::TooFewClasses(class_names.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DatasetError::LabelOutOfRange {
                label,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            views,
            labels,
            class_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn view(&self, name: &str) -> Option<&View> {
        self.views.iter().find(|v| v.name == name)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total_features(&self) -> usize {
        self.views.iter().map(View::width).sum()
    }

    /// Number of instances per encoded class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn shape_report(&self) -> ShapeReport {
        ShapeReport {
            name: self.name.clone(),
            num_instances: self.num_instances(),
            view_widths: self.views.iter().map(|v| (v.name.clone(), v.width())).collect(),
            class_histogram: self
                .class_names
                .iter()
                .cloned()
                .zip(self.class_counts())
                .collect(),
        }
    }
}

/// Summary of a dataset's shape, as printed by the CLI's validate command.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub name: String,
    pub num_instances: usize,
    pub view_widths: Vec<(String, usize)>,
    pub class_histogram: Vec<(String, usize)>,
}

impl fmt::Display for ShapeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "N={}, Q={}, classes={}",
            self.num_instances,
            self.view_widths.len(),
            self.class_histogram.len()
        )?;
        for (name, width) in &self.view_widths {
            writeln!(f, "  view {name}: {width} features")?;
        }
        let total: usize = self.view_widths.iter().map(|(_, w)| w).sum();
        writeln!(f, "  total features: {total}")?;
        for (class, count) in &self.class_histogram {
            writeln!(f, "  class {class}: {count}")?;
        }
        Ok(())
    }
}

/// Joins all views column-wise: view order first, then the within-view
/// column order. A single-view dataset returns its view unchanged.
pub fn concatenate_views(ds: &MultiViewDataset) -> View {
    if ds.views.len() == 1 {
        return ds.views[0].clone();
    }
    let arrays: Vec<ArrayView2<'_, f64>> = ds.views.iter().map(|v| v.features.view()).collect();
    let features = ndarray::concatenate(Axis(1), &arrays).expect("views share the row count");
    let feature_names = ds
        .views
        .iter()
        .flat_map(|v| v.feature_names.iter().cloned())
        .collect();
    let name = ds
        .views
        .iter()
        .map(|v| v.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    View {
        name,
        features,
        feature_names,
    }
}

// ---------------------------------------------------------------------------
// Ingestion

struct Manifest {
    name: String,
    labels: PathBuf,
    views: Vec<(String, PathBuf)>,
}

fn parse_manifest(path: &Path, errors: &mut Vec<DatasetError>) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest_err = |line: usize, message: String| DatasetError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut name = None;
    let mut labels = None;
    let mut views: Vec<(String, PathBuf)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(manifest_err(lineno + 1, format!("expected `key = value`, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(manifest_err(lineno + 1, format!("empty value for `{key}`")));
        }
        match key {
            "name" => name = Some(value.to_string()),
            "labels" => labels = Some(base.join(value)),
            _ => match key.strip_prefix("view.") {
                Some(view) if !view.is_empty() => {
                    if views.iter().any(|(n, _)| n == view) {
                        errors.push(DatasetError::DuplicateView(view.to_string()));
                    } else {
                        views.push((view.to_string(), base.join(value)));
                    }
                }
                _ => return Err(manifest_err(lineno + 1, format!("unknown key `{key}`"))),
            },
        }
    }
    let name = name.ok_or_else(|| manifest_err(0, "missing `name` entry".into()))?;
    let labels = labels.ok_or_else(|| manifest_err(0, "missing `labels` entry".into()))?;
    if views.is_empty() {
        return Err(manifest_err(0, "no `view.<name>` entries".into()));
    }
    Ok(Manifest { name, labels, views })
}

fn io_error(path: &Path, source: std::io::Error) -> DatasetError {
    if source.kind() == std::io::ErrorKind::NotFound {
        DatasetError::MissingFile {
            path: path.to_path_buf(),
        }
    } else {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> DatasetError {
    DatasetError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a view CSV. Cell problems are collected into `errors` so a caller
/// can report all of them at once; `None` means the table is unusable.
fn read_view(name: &str, path: &Path, errors: &mut Vec<DatasetError>) -> Option<View> {
    let mut reader = match csv_reader(path) {
        Ok(r) => r,
        Err(e) => {
            errors.push(e);
            return None;
        }
    };
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => {
            errors.push(csv_error(path, e));
            return None;
        }
    };
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        errors.push(DatasetError::EmptyView(name.to_string()));
        return None;
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    let mut ok = true;
    for (row, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                errors.push(csv_error(path, e));
                return None;
            }
        };
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let cell_err = |message: &str| DatasetError::Cell {
                path: path.to_path_buf(),
                row,
                column: header[col].clone(),
                message: message.to_string(),
            };
            if cell.is_empty() {
                errors.push(cell_err("empty cell"));
                ok = false;
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                Ok(_) => {
                    errors.push(cell_err(&format!("non-finite value `{cell}`")));
                    ok = false;
                }
                Err(_) => {
                    errors.push(cell_err(&format!("non-numeric value `{cell}`")));
                    ok = false;
                }
            }
        }
        rows += 1;
    }
    if !ok {
        return None;
    }
    let features = Array2::from_shape_vec((rows, width), values).expect("csv rows have uniform width");
    match View::new(name, features, header) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(e);
            None
        }
    }
}

/// Reads the labels CSV and encodes classes by first appearance.
fn read_labels(path: &Path, errors: &mut Vec<DatasetError>) -> Option<(Vec<usize>, Vec<String>)> {
    let mut reader = match csv_reader(path) {
        Ok(r) => r,
        Err(e) => {
            errors.push(e);
            return None;
        }
    };
    match reader.headers() {
        Ok(h) if h.len() == 1 && h[0].trim() == "label" => {}
        Ok(h) => {
            errors.push(DatasetError::Csv {
                path: path.to_path_buf(),
                message: format!("expected a single `label` header, found {:?}", h.iter().collect::<Vec<_>>()),
            });
            return None;
        }
        Err(e) => {
            errors.push(csv_error(path, e));
            return None;
        }
    }
    let mut class_names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels = Vec::new();
    let mut ok = true;
    for (row, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                errors.push(csv_error(path, e));
                return None;
            }
        };
        let text = record[0].trim().to_string();
        if text.is_empty() {
            errors.push(DatasetError::Cell {
                path: path.to_path_buf(),
                row,
                column: "label".into(),
                message: "empty label".into(),
            });
            ok = false;
            continue;
        }
        let next = class_names.len();
        let code = *index.entry(text.clone()).or_insert_with(|| {
            class_names.push(text);
            next
        });
        labels.push(code);
    }
    ok.then_some((labels, class_names))
}

fn inspect_manifest(path: &Path) -> (Option<MultiViewDataset>, Vec<DatasetError>) {
    let mut errors = Vec::new();
    let manifest = match parse_manifest(path, &mut errors) {
        Ok(m) => m,
        Err(e) => {
            errors.insert(0, e);
            return (None, errors);
        }
    };
    let labels = read_labels(&manifest.labels, &mut errors);
    let views: Vec<Option<View>> = manifest
        .views
        .iter()
        .map(|(name, p)| read_view(name, p, &mut errors))
        .collect();

    if let Some((labels, _)) = &labels {
        for view in views.iter().flatten() {
            if view.num_rows() != labels.len() {
                errors.push(DatasetError::RowCountMismatch {
                    view: view.name.clone(),
                    expected: labels.len(),
                    found: view.num_rows(),
                });
            }
        }
    }
    if let Some((_, class_names)) = &labels {
        if class_names.len() < 2 {
            errors.push(DatasetError::TooFewClasses(class_names.len()));
        }
    }
    if !errors.is_empty() {
        return (None, errors);
    }
    let (labels, class_names) = labels.expect("no errors implies labels parsed");
    let views = views.into_iter().map(|v| v.expect("no errors implies views parsed")).collect();
    match MultiViewDataset::new(manifest.name, views, labels, class_names) {
        Ok(ds) => (Some(ds), errors),
        Err(e) => (None, vec![e]),
    }
}

/// Loads and validates a dataset from its manifest, failing on the first
/// violation found.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let (ds, mut errors) = inspect_manifest(manifest_path.as_ref());
    match ds {
        Some(ds) => Ok(ds),
        None => Err(errors.remove(0)),
    }
}

/// Runs every ingestion check and returns either the shape report or the
/// complete list of violations.
pub fn validate_manifest(manifest_path: impl AsRef<Path>) -> std::result::Result<ShapeReport, Vec<DatasetError>> {
    match inspect_manifest(manifest_path.as_ref()) {
        (Some(ds), _) => Ok(ds.shape_report()),
        (None, errors) => Err(errors),
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes a dataset as manifest + CSVs into `dir` and returns the manifest
/// path. Reloading it yields an identical dataset.
pub fn write_dataset(ds: &MultiViewDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;

    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_error(&labels_path, e))?;
    w.write_record(["label"]).map_err(|e| csv_error(&labels_path, e))?;
    for &y in &ds.labels {
        w.write_record([&ds.class_names[y]]).map_err(|e| csv_error(&labels_path, e))?;
    }
    w.flush().map_err(|e| io_error(&labels_path, e))?;

    let mut manifest = format!("name = {}\nlabels = labels.csv\n", ds.name);
    for (q, view) in ds.views.iter().enumerate() {
        let file = format!("view{q}_{}.csv", file_stem(&view.name));
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(&view.feature_names).map_err(|e| csv_error(&path, e))?;
        let mut record = Vec::with_capacity(view.width());
        for row in view.features.rows() {
            record.clear();
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        manifest.push_str(&format!("view.{} = {file}\n", view.name));
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| io_error(&manifest_path, e))?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Splitting

/// One train/test partition. Both index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Repeated stratified random train/test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub repetitions: Vec<Split>,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Per-class train counts for a stratified split.
///
/// Each class gets `round(fraction * size)` clamped to `[1, size - 1]`; the
/// counts are then nudged by one at a time, largest classes first, until
/// they add up to `round(fraction * N)` (itself clamped so every class can
/// keep a member on both sides).
pub fn stratified_train_counts(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let mut counts: Vec<usize> = class_sizes
        .iter()
        .map(|&n| ((fraction * n as f64).round() as usize).clamp(1, n - 1))
        .collect();
    let total: usize = class_sizes.iter().sum();
    let k = class_sizes.len();
    let target = ((fraction * total as f64).round() as usize).clamp(k, total - k) as i64;
    let mut diff = target - counts.iter().sum::<usize>() as i64;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
    while diff != 0 {
        for &c in &order {
            if diff > 0 && counts[c] + 1 < class_sizes[c] {
                counts[c] += 1;
                diff -= 1;
            } else if diff < 0 && counts[c] > 1 {
                counts[c] -= 1;
                diff += 1;
            }
            if diff == 0 {
                break;
            }
        }
    }
    counts
}

impl SplitPlan {
    /// Stratified plan over encoded `labels` with `num_classes` classes.
    pub fn stratified(
        labels: &[usize],
        class_names: &[String],
        repetitions: usize,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DatasetError::BadFraction(train_fraction));
        }
        if repetitions == 0 {
            return Err(DatasetError::NoRepetitions);
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
        for (i, &y) in labels.iter().enumerate() {
            members[y].push(i);
        }
        if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
            return Err(DatasetError::ClassTooSmall {
                class: class_names[c].clone(),
                count: m.len(),
            });
        }
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        let counts = stratified_train_counts(&sizes, train_fraction);

        let repetitions = (0..repetitions)
            .map(|rep| {
                let mut rng = seed::rng(seed::derive(seed, rep as u64));
                let mut train = Vec::new();
                let mut test = Vec::new();
                for (class_members, &n_train) in members.iter().zip(&counts) {
                    let mut shuffled = class_members.clone();
                    shuffled.shuffle(&mut rng);
                    train.extend_from_slice(&shuffled[..n_train]);
                    test.extend_from_slice(&shuffled[n_train..]);
                }
                train.sort_unstable();
                test.sort_unstable();
                Split { train, test }
            })
            .collect();
        Ok(Self {
            repetitions,
            train_fraction,
            seed,
        })
    }

    /// Writes the plan as `repetition,instance_index,role` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["repetition", "instance_index", "role"])?;
        for (rep, split) in self.repetitions.iter().enumerate() {
            let mut rows: Vec<(usize, &str)> = split
                .train
                .iter()
                .map(|&i| (i, "train"))
                .chain(split.test.iter().map(|&i| (i, "test")))
                .collect();
            rows.sort_unstable();
            for (i, role) in rows {
                w.write_record([rep.to_string(), i.to_string(), role.to_string()])?;
            }
        }
        w.flush()
    }
}

/// Reads the partitions back from a split-plan CSV.
pub fn read_split_csv<R: std::io::Read>(input: R) -> std::result::Result<Vec<Split>, String> {
    let mut reader = csv::Reader::from_reader(input);
    let mut splits: Vec<Split> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        let rep: usize = record[0].parse().map_err(|_| format!("bad repetition `{}`", &record[0]))?;
        let idx: usize = record[1].parse().map_err(|_| format!("bad index `{}`", &record[1]))?;
        while splits.len() <= rep {
            splits.push(Split {
                train: Vec::new(),
                test: Vec::new(),
            });
        }
        match &record[2] {
            "train" => splits[rep].train.push(idx),
            "test" => splits[rep].test.push(idx),
            other => return Err(format!("bad role `{other}`")),
        }
    }
    Ok(splits)
}

/// Stratified split plan for a dataset.
pub fn make_split_plan(
    ds: &MultiViewDataset,
    repetitions: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    SplitPlan::stratified(&ds.labels, &ds.class_names, repetitions, train_fraction, seed)
}
