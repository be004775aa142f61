//! Randomized CART trees and random forests with addressable leaves.
//!
//! Trees are grown to purity on a bootstrap sample, examining a random
//! subset of `mtry` features at each node and splitting on the Gini-optimal
//! midpoint threshold. Every leaf carries a dense id (`0..num_leaves`) so
//! that two instances can be compared by the leaf they reach.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("feature table is empty ({rows} rows x {cols} columns)")]
    EmptyTable { rows: usize, cols: usize },
    #[error("{labels} labels for {rows} rows")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected feature width {expected}, got {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("invalid forest configuration: {0}")]
    Config(String),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("forest serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, ForestError>;

/// Size of the random feature subset examined at each node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mtry {
    /// `ceil(sqrt(p))`
    Sqrt,
    /// every feature
    All,
    /// a fixed count, clamped to `[1, p]`
    Count(usize),
}

impl Mtry {
    pub fn resolve(self, p: usize) -> usize {
        let m = match self {
            Mtry::Sqrt => (p as f64).sqrt().ceil() as usize,
            Mtry::All => p,
            Mtry::Count(m) => m,
        };
        m.clamp(1, p.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub num_trees: usize,
    pub mtry: Mtry,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    /// Train each tree on `N` draws with replacement; otherwise on the
    /// training set itself.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            num_trees: 500,
            mtry: Mtry::Sqrt,
            min_samples_split: 2,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(ForestError::Config("num_trees must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(ForestError::Config("min_samples_split must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Instances with `x[feature] <= threshold` go left.
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        class_counts: Vec<u32>,
    },
}

/// A decision tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    width: usize,
}

impl Tree {
    /// Assembles a tree from explicit nodes, checking structural invariants.
    pub fn from_nodes(nodes: Vec<Node>, width: usize) -> Result<Self> {
        let bad = |m: String| Err(ForestError::MalformedTree(m));
        if nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut leaves: Vec<Option<usize>> = Vec::new();
        let mut referenced = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            match node {
                Node::Internal {
                    feature, left, right, ..
                } => {
                    if *feature >= width {
                        return bad(format!("node {i} splits on feature {feature} >= width {width}"));
                    }
                    for &c in [left, right] {
                        if c <= i || c >= nodes.len() || referenced[c] {
                            return bad(format!("node {i} has invalid child {c}"));
                        }
                        referenced[c] = true;
                    }
                }
                Node::Leaf { leaf_id, class_counts } => {
                    if class_counts.iter().sum::<u32>() == 0 {
                        return bad(format!("leaf {leaf_id} has no training mass"));
                    }
                    if leaves.len() <= *leaf_id {
                        leaves.resize(leaf_id + 1, None);
                    }
                    if leaves[*leaf_id].replace(i).is_some() {
                        return bad(format!("duplicate leaf id {leaf_id}"));
                    }
                }
            }
        }
        if referenced.iter().skip(1).any(|r| !r) {
            return bad("unreachable node".into());
        }
        let leaves: Option<Vec<usize>> = leaves.into_iter().collect();
        let Some(leaves) = leaves else {
            return bad("leaf ids are not contiguous".into());
        };
        Ok(Self { nodes, leaves, width })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn feature_space_width(&self) -> usize {
        self.width
    }

    /// Training class counts of a leaf.
    pub fn leaf_counts(&self, leaf_id: usize) -> &[u32] {
        match &self.nodes[self.leaves[leaf_id]] {
            Node::Leaf { class_counts, .. } => class_counts,
            Node::Internal { .. } => unreachable!("leaf table points at a leaf"),
        }
    }

    /// The leaf reached by `x`.
    pub fn leaf_index(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        if x.len() != self.width {
            return Err(ForestError::WidthMismatch {
                expected: self.width,
                found: x.len(),
            });
        }
        Ok(self.leaf_of(x))
    }

    pub(crate) fn leaf_of(&self, x: ArrayView1<'_, f64>) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { leaf_id, .. } => return *leaf_id,
            }
        }
    }

    /// Leaf ids for every row of `table`.
    pub fn leaf_indices(&self, table: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        if table.ncols() != self.width {
            return Err(ForestError::WidthMismatch {
                expected: self.width,
                found: table.ncols(),
            });
        }
        Ok(table.rows().into_iter().map(|r| self.leaf_of(r)).collect())
    }
}

/// Draws `n` indices from `0..n` with replacement.
pub fn bootstrap_sample(n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Seed used for tree `k` of a forest seeded with `forest_seed`.
pub fn tree_seed(forest_seed: u64, k: usize) -> u64 {
    seed::derive(forest_seed, k as u64)
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    num_classes: usize,
    mtry: usize,
    min_samples_split: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
    num_leaves: usize,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Grower<'_> {
    fn class_counts(&self, sample: &[usize]) -> Vec<u32> {
        let mut counts = vec![0u32; self.num_classes];
        for &i in sample {
            counts[self.y[i]] += 1;
        }
        counts
    }

    fn push_leaf(&mut self, class_counts: Vec<u32>) -> usize {
        let leaf_id = self.num_leaves;
        self.num_leaves += 1;
        self.nodes.push(Node::Leaf { leaf_id, class_counts });
        self.nodes.len() - 1
    }

    /// Best Gini split on one feature, maximizing `sum_l c^2/n_l + sum_r c^2/n_r`
    /// (equivalent to minimizing the weighted child impurity).
    fn best_split_on(&self, feature: usize, sample: &[usize], parent: &[u32]) -> Option<SplitChoice> {
        let mut pairs: Vec<(f64, usize)> = sample.iter().map(|&i| (self.x[[i, feature]], self.y[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[pairs.len() - 1].0 {
            return None;
        }
        let n = pairs.len();
        let mut left = vec![0u64; self.num_classes];
        let mut right: Vec<u64> = parent.iter().map(|&c| u64::from(c)).collect();
        let mut sq_left: u64 = 0;
        let mut sq_right: u64 = right.iter().map(|c| c * c).sum();
        let mut best: Option<SplitChoice> = None;
        for pos in 0..n - 1 {
            let k = pairs[pos].1;
            sq_left += 2 * left[k] + 1;
            left[k] += 1;
            sq_right -= 2 * right[k] - 1;
            right[k] -= 1;
            let (lo, hi) = (pairs[pos].0, pairs[pos + 1].0);
            if lo == hi {
                continue;
            }
            let n_left = (pos + 1) as f64;
            let score = sq_left as f64 / n_left + sq_right as f64 / (n as f64 - n_left);
            if best.as_ref().is_none_or(|b| score > b.score) {
                let mid = lo + (hi - lo) / 2.0;
                // adjacent floats: the midpoint can round up onto `hi`
                let threshold = if mid < hi { mid } else { lo };
                best = Some(SplitChoice {
                    feature,
                    threshold,
                    score,
                });
            }
        }
        best
    }

    fn choose_split(&self, sample: &[usize], parent: &[u32], rng: &mut Rng) -> Option<SplitChoice> {
        let p = self.x.ncols();
        // one retry with a fresh subset before giving up on the node
        for _ in 0..2 {
            let mut best: Option<SplitChoice> = None;
            for feature in index::sample(rng, p, self.mtry) {
                if let Some(c) = self.best_split_on(feature, sample, parent) {
                    if best.as_ref().is_none_or(|b| c.score > b.score) {
                        best = Some(c);
                    }
                }
            }
            if best.is_some() || self.mtry == p {
                return best;
            }
        }
        None
    }

    fn grow(&mut self, sample: Vec<usize>, depth: usize, rng: &mut Rng) -> usize {
        let counts = self.class_counts(&sample);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || sample.len() < self.min_samples_split {
            return self.push_leaf(counts);
        }
        let Some(split) = self.choose_split(&sample, &counts, rng) else {
            return self.push_leaf(counts);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = sample
            .into_iter()
            .partition(|&i| self.x[[i, split.feature]] <= split.threshold);
        debug_assert!(!left.is_empty() && !right.is_empty());

        let id = self.nodes.len();
        self.nodes.push(Node::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let l = self.grow(left, depth + 1, rng);
        let r = self.grow(right, depth + 1, rng);
        if let Node::Internal { left, right, .. } = &mut self.nodes[id] {
            *left = l;
            *right = r;
        }
        id
    }
}

fn grow_tree(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    config: &ForestConfig,
    seed: u64,
) -> Tree {
    let mut rng = seed::rng(seed);
    let n = x.nrows();
    let sample = if config.bootstrap {
        bootstrap_sample(n, &mut rng)
    } else {
        (0..n).collect()
    };
    let mut grower = Grower {
        x,
        y,
        num_classes,
        mtry: config.mtry.resolve(x.ncols()),
        min_samples_split: config.min_samples_split,
        max_depth: config.max_depth,
        nodes: Vec::new(),
        num_leaves: 0,
    };
    grower.grow(sample, 0, &mut rng);
    let mut leaves = vec![0; grower.num_leaves];
    for (i, node) in grower.nodes.iter().enumerate() {
        if let Node::Leaf { leaf_id, .. } = node {
            leaves[*leaf_id] = i;
        }
    }
    Tree {
        nodes: grower.nodes,
        leaves,
        width: x.ncols(),
    }
}

/// An ensemble of `M` trees sharing a class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    num_classes: usize,
    training_size: usize,
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format: String,
    version: u32,
    forest: Forest,
}

const FORMAT_NAME: &str = "rfdiss-forest";
const FORMAT_VERSION: u32 = 1;

impl Forest {
    /// Trains `config.num_trees` trees. Trees are grown in parallel from
    /// per-tree derived seeds, so the result does not depend on scheduling.
    pub fn train(
        features: ArrayView2<'_, f64>,
        labels: &[usize],
        num_classes: usize,
        config: &ForestConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (rows, cols) = features.dim();
        if rows < 2 || cols == 0 {
            return Err(ForestError::EmptyTable { rows, cols });
        }
        if labels.len() != rows {
            return Err(ForestError::LengthMismatch {
                rows,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ForestError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(ForestError::SingleClass);
        }
        let trees = (0..config.num_trees)
            .into_par_iter()
            .map(|k| grow_tree(features, labels, num_classes, config, tree_seed(config.seed, k)))
            .collect();
        Ok(Self {
            trees,
            num_classes,
            training_size: rows,
        })
    }

    pub fn from_trees(trees: Vec<Tree>, num_classes: usize, training_size: usize) -> Result<Self> {
        let Some(first) = trees.first() else {
            return Err(ForestError::Config("a forest needs at least one tree".into()));
        };
        let width = first.width;
        for t in &trees {
            if t.width != width {
                return Err(ForestError::WidthMismatch {
                    expected: width,
                    found: t.width,
                });
            }
            for leaf in 0..t.num_leaves() {
                if t.leaf_counts(leaf).len() != num_classes {
                    return Err(ForestError::MalformedTree(format!(
                        "leaf {leaf} has {} class counts, forest has {num_classes} classes",
                        t.leaf_counts(leaf).len()
                    )));
                }
            }
        }
        Ok(Self {
            trees,
            num_classes,
            training_size,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn training_size(&self) -> usize {
        self.training_size
    }

    pub fn feature_space_width(&self) -> usize {
        self.trees[0].width
    }

    fn check_width(&self, found: usize) -> Result<()> {
        let expected = self.feature_space_width();
        if found != expected {
            return Err(ForestError::WidthMismatch { expected, found });
        }
        Ok(())
    }

    /// Mean over trees of the reached leaf's class proportions.
    pub fn predict_proba(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        self.check_width(x.len())?;
        let mut acc = vec![0.0; self.num_classes];
        for tree in &self.trees {
            let counts = tree.leaf_counts(tree.leaf_of(x));
            let total: u32 = counts.iter().sum();
            for (a, &c) in acc.iter_mut().zip(counts) {
                *a += f64::from(c) / f64::from(total);
            }
        }
        let m = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        Ok(acc)
    }

    /// Class with the largest summed leaf proportion; ties go to the lowest
    /// class index.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(argmax_lowest(&self.predict_proba(x)?))
    }

    pub fn predict_rows(&self, table: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        self.check_width(table.ncols())?;
        table.rows().into_iter().map(|r| self.predict(r)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ForestFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            forest: self.clone(),
        })
        .expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ForestFile = serde_json::from_str(text).map_err(|e| ForestError::Serialization(e.to_string()))?;
        if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
            return Err(ForestError::Serialization(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.forest)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
