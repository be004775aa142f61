//! Multi-view classification with random-forest dissimilarities.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] holds multi-view tables, manifest/CSV ingestion and
//!   stratified repeated splitting.
//! * [`forest`] grows randomized CART trees and forests whose leaves are
//!   addressable, which is what the dissimilarity measure needs.
//! * [`dissimilarity`] turns forests into per-view and joint dissimilarity
//!   matrices and converts them into similarity kernels.
//! * [`svm`] is a precomputed-kernel soft-margin SVM (pairwise dual solver,
//!   one-vs-one multi-class, internal C selection).
//! * [`feature_selection`] provides the early-integration baselines
//!   (ReliefF, SVM-RFE and the feature-count rules).
//! * [`pipelines`] wires the six compared methods end to end.
//! * [`evaluation`] runs the repeated-split protocol and computes accuracy
//!   summaries, average ranks and pairwise sign tests.
//! * [`synth`] generates seeded synthetic multi-view fixtures.

pub mod dataset;
pub mod dissimilarity;
pub mod evaluation;
pub mod feature_selection;
pub mod forest;
pub mod pipelines;
pub mod seed;
pub mod svm;
pub mod synth;

pub use dataset::{MultiViewDataset, SplitPlan, View};
pub use dissimilarity::{DissimilarityMatrix, SimilarityMatrix};
pub use forest::{Forest, ForestConfig, Mtry, Tree};
pub use pipelines::{MethodId, PipelineConfig, PipelineResult};
pub use svm::{KernelGrid, SvmModel};

/// Library version, echoed into run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
