//! The six compared classification methods, each mapping a train/test split
//! of a multi-view dataset to test-set predictions.
//!
//! | method        | integration  | outline                                              |
//! |---------------|--------------|------------------------------------------------------|
//! | `relf_rf`     | early        | concatenate, ReliefF, keep top features, RF          |
//! | `svmrfe_rf`   | early        | concatenate, SVM-RFE, keep top features, RF          |
//! | `rfsvm`       | intermediate | per-view RF dissimilarities, average, `1 - D` as SVM kernel |
//! | `rfdis`       | intermediate | per-view RF dissimilarities, average, rows as RF features |
//! | `late_rf`     | late         | per-view RF, plurality vote                          |
//! | `late_rfdis`  | late         | per-view dissimilarity space, per-view RF, vote      |
//!
//! Every trained component sees the training rows and labels only. The
//! per-view forests are identical for `rfsvm`, `rfdis`, `late_rf` and
//! `late_rfdis`, so a [`SplitContext`] trains them once and shares them.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use thiserror::Error;

use crate::dataset::{concatenate_views, MultiViewDataset, Split};
use crate::dissimilarity::{self, DissimilarityError, DissimilarityMatrix};
use crate::feature_selection::{self, FeatureRanking, SelectionError};
use crate::forest::{Forest, ForestConfig, ForestError};
use crate::seed;
use crate::svm::{self, KernelGrid, SvmError, SvmModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid split: {0}")]
    BadSplit(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Dissimilarity(#[from] DissimilarityError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodId {
    RelfRf,
    SvmrfeRf,
    Rfsvm,
    Rfdis,
    LateRf,
    LateRfdis,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::RelfRf,
        MethodId::SvmrfeRf,
        MethodId::Rfsvm,
        MethodId::Rfdis,
        MethodId::LateRf,
        MethodId::LateRfdis,
    ];

    /// Identifier used on the command line and in CSV files.
    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::RelfRf => "relf_rf",
            MethodId::SvmrfeRf => "svmrfe_rf",
            MethodId::Rfsvm => "rfsvm",
            MethodId::Rfdis => "rfdis",
            MethodId::LateRf => "late_rf",
            MethodId::LateRfdis => "late_rfdis",
        }
    }

    /// Column heading used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            MethodId::RelfRf => "RELF+RF",
            MethodId::SvmrfeRf => "SVMRFE+RF",
            MethodId::Rfsvm => "RFSVM",
            MethodId::Rfdis => "RFDIS",
            MethodId::LateRf => "LateRF",
            MethodId::LateRfdis => "LateRFDIS",
        }
    }

    pub fn is_feature_selection(self) -> bool {
        matches!(self, MethodId::RelfRf | MethodId::SvmrfeRf)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == norm || m.label().to_ascii_lowercase().replace('+', "_") == norm)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Hyperparameters shared by all methods.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Used for every forest; its seed is replaced by derived seeds.
    pub forest: ForestConfig,
    pub c_grid: KernelGrid,
    /// ReliefF neighbours, clamped to (smallest training class - 1).
    pub relief_k: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            c_grid: KernelGrid::default(),
            relief_k: 10,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn forest_config(&self, tag: &str, index: usize) -> ForestConfig {
        self.forest.with_seed(seed::derive_tagged(self.seed, tag, index as u64))
    }
}

/// Run details kept alongside the predictions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineMetadata {
    pub chosen_c: Option<f64>,
    pub cv_accuracy: Option<Vec<f64>>,
    /// Selected feature indices in the concatenated space, best first.
    pub selected_features: Option<Vec<usize>>,
    /// Per-view test predictions behind a late-integration vote.
    pub view_votes: Option<Vec<Vec<usize>>>,
    /// The per-view forests came from the split's shared cache.
    pub shared_view_forests: bool,
    /// Width of the representation the final classifier was trained on.
    pub representation_width: usize,
}

/// Everything trained on the training partition, kept for audits such as
/// the test-label mutation check.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainedModels {
    pub forests: Vec<Arc<Forest>>,
    pub svm: Option<SvmModel>,
    pub ranking: Option<FeatureRanking>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub method: MethodId,
    /// One class per test instance, in `split.test` order.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub metadata: PipelineMetadata,
    pub models: TrainedModels,
}

struct ViewSpaces {
    train: Vec<DissimilarityMatrix>,
    test: Vec<DissimilarityMatrix>,
    joint_train: DissimilarityMatrix,
    joint_test: DissimilarityMatrix,
}

/// A dataset, one split and the per-split cache of per-view forests and
/// dissimilarity matrices.
pub struct SplitContext<'a> {
    ds: &'a MultiViewDataset,
    split: &'a Split,
    config: &'a PipelineConfig,
    train_labels: Vec<usize>,
    forests: Mutex<Option<Arc<Vec<Arc<Forest>>>>>,
    spaces: Mutex<Option<Arc<ViewSpaces>>>,
}

impl<'a> SplitContext<'a> {
    pub fn new(ds: &'a MultiViewDataset, split: &'a Split, config: &'a PipelineConfig) -> Result<Self> {
        let n = ds.num_instances();
        if split.train.is_empty() || split.test.is_empty() {
            return Err(PipelineError::BadSplit("train and test must both be nonempty".into()));
        }
        let mut seen = vec![false; n];
        for &i in split.train.iter().chain(&split.test) {
            if i >= n {
                return Err(PipelineError::BadSplit(format!("index {i} out of range for {n} instances")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(PipelineError::BadSplit(format!("index {i} appears twice")));
            }
        }
        let train_labels = ds.labels_at(&split.train);
        if train_labels.iter().all(|&y| y == train_labels[0]) {
            return Err(PipelineError::BadSplit("training partition holds a single class".into()));
        }
        Ok(Self {
            ds,
            split,
            config,
            train_labels,
            forests: Mutex::new(None),
            spaces: Mutex::new(None),
        })
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.train_labels
    }

    /// One forest per view, trained on the training rows.
    pub fn view_forests(&self) -> Result<Arc<Vec<Arc<Forest>>>> {
        let mut slot = self.forests.lock().expect("forest cache poisoned");
        if let Some(f) = slot.as_ref() {
            return Ok(Arc::clone(f));
        }
        let forests = self
            .ds
            .views()
            .iter()
            .enumerate()
            .map(|(q, view)| {
                let x = view.rows(&self.split.train);
                let cfg = self.config.forest_config("view-forest", q);
                Forest::train(x.view(), &self.train_labels, self.ds.num_classes(), &cfg).map(Arc::new)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let forests = Arc::new(forests);
        *slot = Some(Arc::clone(&forests));
        Ok(forests)
    }

    fn spaces(&self) -> Result<Arc<ViewSpaces>> {
        let forests = self.view_forests()?;
        let mut slot = self.spaces.lock().expect("dissimilarity cache poisoned");
        if let Some(s) = slot.as_ref() {
            return Ok(Arc::clone(s));
        }
        let (tr, te) = (&self.split.train, &self.split.test);
        let mut train = Vec::with_capacity(forests.len());
        let mut test = Vec::with_capacity(forests.len());
        for (view, forest) in self.ds.views().iter().zip(forests.iter()) {
            let xtr = view.rows(tr);
            let xte = view.rows(te);
            train.push(dissimilarity::build_square(forest, xtr.view(), tr)?);
            test.push(dissimilarity::build_matrix(forest, xte.view(), te, xtr.view(), tr)?);
        }
        let spaces = Arc::new(ViewSpaces {
            joint_train: dissimilarity::joint_average(&train)?,
            joint_test: dissimilarity::joint_average(&test)?,
            train,
            test,
        });
        *slot = Some(Arc::clone(&spaces));
        Ok(spaces)
    }

    /// Per-view train x train dissimilarity matrices.
    pub fn view_train_matrices(&self) -> Result<Vec<DissimilarityMatrix>> {
        Ok(self.spaces()?.train.clone())
    }

    /// Joint train x train and test x train matrices.
    pub fn joint_matrices(&self) -> Result<(DissimilarityMatrix, DissimilarityMatrix)> {
        let s = self.spaces()?;
        Ok((s.joint_train.clone(), s.joint_test.clone()))
    }

    fn finish(&self, method: MethodId, predictions: Vec<usize>, metadata: PipelineMetadata, models: TrainedModels) -> PipelineResult {
        let truth = self.ds.labels_at(&self.split.test);
        let correct = predictions.iter().zip(&truth).filter(|(p, t)| p == t).count();
        PipelineResult {
            method,
            accuracy: correct as f64 / truth.len() as f64,
            predictions,
            metadata,
            models,
        }
    }

    pub fn run(&self, method: MethodId) -> Result<PipelineResult> {
        match method {
            MethodId::RelfRf | MethodId::SvmrfeRf => self.run_selection(method),
            MethodId::Rfsvm => self.run_rfsvm(),
            MethodId::Rfdis => self.run_rfdis(),
            MethodId::LateRf => self.run_late_rf(),
            MethodId::LateRfdis => self.run_late_rfdis(),
        }
    }

    fn run_selection(&self, method: MethodId) -> Result<PipelineResult> {
        let all = concatenate_views(self.ds);
        let xtr = all.rows(&self.split.train);
        let xte = all.rows(&self.split.test);
        let ranking = if method == MethodId::RelfRf {
            let mut counts = vec![0usize; self.ds.num_classes()];
            for &y in &self.train_labels {
                counts[y] += 1;
            }
            let smallest = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
            let k = self.config.relief_k.min(smallest.saturating_sub(1)).max(1);
            feature_selection::relief_scores(xtr.view(), &self.train_labels, k)?
        } else {
            feature_selection::svmrfe_rank(xtr.view(), &self.train_labels)?
        };
        let count = feature_selection::select_count(all.width())?;
        let str_sel = feature_selection::apply_selection(xtr.view(), &ranking, count)?;
        let ste_sel = feature_selection::apply_selection(xte.view(), &ranking, count)?;
        let tag = if method == MethodId::RelfRf { "relf-forest" } else { "svmrfe-forest" };
        let forest = Forest::train(
            str_sel.view(),
            &self.train_labels,
            self.ds.num_classes(),
            &self.config.forest_config(tag, 0),
        )?;
        let predictions = forest.predict_rows(ste_sel.view())?;
        let metadata = PipelineMetadata {
            selected_features: Some(ranking.top(count).to_vec()),
            representation_width: count,
            ..PipelineMetadata::default()
        };
        let models = TrainedModels {
            forests: vec![Arc::new(forest)],
            svm: None,
            ranking: Some(ranking),
        };
        Ok(self.finish(method, predictions, metadata, models))
    }

    fn run_rfsvm(&self) -> Result<PipelineResult> {
        let spaces = self.spaces()?;
        let kernel = dissimilarity::to_similarity(&spaces.joint_train);
        let selection = svm::select_c(
            &kernel,
            &self.train_labels,
            &self.config.c_grid,
            seed::derive_tagged(self.config.seed, "c-select", 0),
        )?;
        let model = svm::train_svm(&kernel, &self.train_labels, selection.c)?;
        let test_kernel = dissimilarity::to_similarity(&spaces.joint_test);
        let predictions = model.predict_rows(test_kernel.values())?;
        let metadata = PipelineMetadata {
            chosen_c: Some(selection.c),
            cv_accuracy: Some(selection.cv_accuracy),
            shared_view_forests: true,
            representation_width: self.split.train.len(),
            ..PipelineMetadata::default()
        };
        let models = TrainedModels {
            forests: self.view_forests()?.to_vec(),
            svm: Some(model),
            ranking: None,
        };
        Ok(self.finish(MethodId::Rfsvm, predictions, metadata, models))
    }

    fn dissimilarity_forest(&self, train: &DissimilarityMatrix, tag: &str, index: usize) -> Result<Forest> {
        Ok(Forest::train(
            train.values(),
            &self.train_labels,
            self.ds.num_classes(),
            &self.config.forest_config(tag, index),
        )?)
    }

    fn run_rfdis(&self) -> Result<PipelineResult> {
        let spaces = self.spaces()?;
        let forest = self.dissimilarity_forest(&spaces.joint_train, "rfdis-forest", 0)?;
        let predictions = forest.predict_rows(spaces.joint_test.values())?;
        let mut forests = self.view_forests()?.to_vec();
        forests.push(Arc::new(forest));
        let metadata = PipelineMetadata {
            shared_view_forests: true,
            representation_width: spaces.joint_train.shape().1,
            ..PipelineMetadata::default()
        };
        let models = TrainedModels {
            forests,
            ..TrainedModels::default()
        };
        Ok(self.finish(MethodId::Rfdis, predictions, metadata, models))
    }

    fn run_late_rf(&self) -> Result<PipelineResult> {
        let forests = self.view_forests()?;
        let votes = self
            .ds
            .views()
            .iter()
            .zip(forests.iter())
            .map(|(view, forest)| forest.predict_rows(view.rows(&self.split.test).view()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let predictions = plurality_vote(&votes, self.ds.num_classes());
        let metadata = PipelineMetadata {
            view_votes: Some(votes),
            shared_view_forests: true,
            representation_width: self.ds.total_features(),
            ..PipelineMetadata::default()
        };
        let models = TrainedModels {
            forests: forests.to_vec(),
            ..TrainedModels::default()
        };
        Ok(self.finish(MethodId::LateRf, predictions, metadata, models))
    }

    fn run_late_rfdis(&self) -> Result<PipelineResult> {
        let spaces = self.spaces()?;
        let mut forests = self.view_forests()?.to_vec();
        let mut votes = Vec::with_capacity(spaces.train.len());
        for (q, (train, test)) in spaces.train.iter().zip(&spaces.test).enumerate() {
            let forest = self.dissimilarity_forest(train, "late-rfdis-forest", q)?;
            votes.push(forest.predict_rows(test.values())?);
            forests.push(Arc::new(forest));
        }
        let predictions = plurality_vote(&votes, self.ds.num_classes());
        let metadata = PipelineMetadata {
            view_votes: Some(votes),
            shared_view_forests: true,
            representation_width: self.split.train.len(),
            ..PipelineMetadata::default()
        };
        let models = TrainedModels {
            forests,
            ..TrainedModels::default()
        };
        Ok(self.finish(MethodId::LateRfdis, predictions, metadata, models))
    }
}

/// Per-instance plurality over views; ties go to the lowest class index.
pub fn plurality_vote(votes: &[Vec<usize>], num_classes: usize) -> Vec<usize> {
    let n = votes.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut counts = vec![0usize; num_classes];
            for v in votes {
                counts[v[i]] += 1;
            }
            let mut best = 0;
            for c in 1..num_classes {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Runs several methods on one split, sharing the per-view forests.
pub fn run_methods(
    ds: &MultiViewDataset,
    split: &Split,
    config: &PipelineConfig,
    methods: &[MethodId],
) -> std::result::Result<Vec<PipelineResult>, (MethodId, PipelineError)> {
    let ctx = SplitContext::new(ds, split, config).map_err(|e| (methods.first().copied().unwrap_or(MethodId::RelfRf), e))?;
    methods.iter().map(|&m| ctx.run(m).map_err(|e| (m, e))).collect()
}

fn run_single(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig, method: MethodId) -> Result<PipelineResult> {
    SplitContext::new(ds, split, config)?.run(method)
}

pub fn run_relf_rf(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<PipelineResult> {
    run_single(ds, split, config, MethodId::RelfRf)
}

pub fn run_svmrfe_rf(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<PipelineResult> {
    run_single(ds, split, config, MethodId::SvmrfeRf)
}

pub fn run_rfsvm(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<PipelineResult> {
    run_single(ds, split, config, MethodId::Rfsvm)
}

pub fn run_rfdis(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<PipelineResult> {
    run_single(ds, split, config, MethodId::Rfdis)
}

pub fn run_late_rf(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<PipelineResult> {
    run_single(ds, split, config, MethodId::LateRf)
}

pub fn run_late_rfdis(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<PipelineResult> {
    run_single(ds, split, config, MethodId::LateRfdis)
}

/// Dissimilarity representation of the training rows (for inspection).
pub fn joint_training_space(ds: &MultiViewDataset, split: &Split, config: &PipelineConfig) -> Result<Array2<f64>> {
    let ctx = SplitContext::new(ds, split, config)?;
    Ok(ctx.joint_matrices()?.0.into_values())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
            assert_eq!(m.label().parse::<MethodId>().unwrap(), m);
        }
        assert_eq!("RFSVM".parse::<MethodId>().unwrap(), MethodId::Rfsvm);
        assert!("mrmr".parse::<MethodId>().is_err());
    }

    #[test]
    fn vote_ties_go_low() {
        let votes = vec![vec![1, 0, 2], vec![0, 0, 1]];
        assert_eq!(plurality_vote(&votes, 3), [0, 0, 1]);
        let unanimous = vec![vec![2, 1], vec![2, 1], vec![2, 1]];
        assert_eq!(plurality_vote(&unanimous, 3), [2, 1]);
    }
}
