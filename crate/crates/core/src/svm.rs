//! Soft-margin SVM over a caller-supplied kernel matrix.
//!
//! The binary dual
//!
//! ```text
//! max  sum(a) - 1/2 a' Q a     Q_ij = y_i y_j K_ij
//! s.t. 0 <= a_i <= C,  y' a = 0
//! ```
//!
//! is solved by pairwise coordinate ascent, always updating the maximal
//! KKT-violating pair. The kernel need not be positive semidefinite: a
//! non-positive curvature along the chosen pair is replaced by a tiny
//! positive constant, which still moves the objective uphill and ends at a
//! box bound. Multi-class problems are decomposed one-vs-one.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::dissimilarity::SimilarityMatrix;
use crate::seed;

/// Curvature floor for non-PSD pairs.
const TAU: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("kernel must be square, got {0} x {1}")]
    NotSquare(usize, usize),
    #[error("kernel is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("kernel has a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("expected length {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("C must be positive and finite, got {0}")]
    BadC(f64),
    #[error("invalid C grid: {0}")]
    BadGrid(String),
    #[error("class {class} has {count} training member(s); cross-validation needs at least 2")]
    ClassTooSmall { class: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, SvmError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop once the maximal KKT violation drops below this.
    pub tolerance: f64,
    /// Iteration cap, in passes of `n` pair updates.
    pub max_passes: usize,
    /// Keep the dual objective after every update.
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_passes: 10_000,
            record_trace: false,
        }
    }
}

/// Solution of one binary dual problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Decision function offset: `f(x) = sum(a_i y_i K(x_i, x)) + bias`.
    pub bias: f64,
    /// Dual objective (maximization form) at the returned iterate.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest KKT violation `m(a) - M(a)` at the returned iterate.
    pub violation: f64,
    pub trace: Vec<f64>,
}

fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    // G = Q a - e, so 1/2 a'Qa - e'a = 1/2 sum a_i (G_i - 1)
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

/// Solves the binary dual for labels `y` in {-1, +1}.
pub fn solve_dual(kernel: ArrayView2<'_, f64>, y: &[f64], c: f64, options: &SolverOptions) -> DualSolution {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut trace = Vec::new();
    let max_iter = options.max_passes.saturating_mul(n.max(1));
    let mut iterations = 0;
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[[i, j]];

    let (converged, violation) = loop {
        // maximal violating pair
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        let (mut i, mut j) = (usize::MAX, usize::MAX);
        for t in 0..n {
            let v = -y[t] * grad[t];
            let up = if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
            let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
            if up && v > g_max {
                g_max = v;
                i = t;
            }
            if low && v < g_min {
                g_min = v;
                j = t;
            }
        }
        let violation = g_max - g_min;
        if i == usize::MAX || j == usize::MAX || violation < options.tolerance {
            break (true, violation.max(0.0));
        }
        if iterations >= max_iter {
            break (false, violation);
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (kii, kjj, kij) = (kernel[[i, i]], kernel[[j, j]], kernel[[i, j]]);
        if y[i] != y[j] {
            let mut quad = kii + kjj - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = kii + kjj - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (k, g) in grad.iter_mut().enumerate() {
            *g += q(i, k) * di + q(j, k) * dj;
        }
        if options.record_trace {
            trace.push(dual_objective(&alpha, &grad));
        }
    };

    // offset: mean over free vectors, else the middle of the feasible range
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut free_sum) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };

    DualSolution {
        objective: dual_objective(&alpha, &grad),
        alpha,
        bias: -rho,
        iterations,
        converged,
        violation,
        trace,
    }
}

/// One one-vs-one subproblem: `first` is the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryModel {
    pub first: usize,
    pub second: usize,
    /// Positions (in the training set) of the instances of both classes.
    pub indices: Vec<usize>,
    pub alpha: Vec<f64>,
    /// Signed dual weights `a_i y_i`, aligned with `indices`.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BinaryModel {
    pub fn decision(&self, kernel_row: ArrayView1<'_, f64>) -> f64 {
        self.indices
            .iter()
            .zip(&self.coefficients)
            .map(|(&i, &w)| w * kernel_row[i])
            .sum::<f64>()
            + self.bias
    }

    /// Class voted for by this subproblem.
    pub fn vote(&self, kernel_row: ArrayView1<'_, f64>) -> usize {
        if self.decision(kernel_row) > 0.0 {
            self.first
        } else {
            self.second
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub c: f64,
    /// Distinct training classes, ascending.
    pub classes: Vec<usize>,
    pub training_size: usize,
    pub subproblems: Vec<BinaryModel>,
}

fn check_kernel(kernel: ArrayView2<'_, f64>) -> Result<()> {
    let (r, c) = kernel.dim();
    if r != c {
        return Err(SvmError::NotSquare(r, c));
    }
    for i in 0..r {
        for j in i..r {
            let (a, b) = (kernel[[i, j]], kernel[[j, i]]);
            if !a.is_finite() {
                return Err(SvmError::NonFinite(i, j));
            }
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(SvmError::Asymmetric(i, j));
            }
        }
    }
    Ok(())
}

impl SvmModel {
    /// Trains one-vs-one binary machines on a raw kernel matrix.
    pub fn train(kernel: ArrayView2<'_, f64>, labels: &[usize], c: f64, options: &SolverOptions) -> Result<Self> {
        check_kernel(kernel)?;
        if labels.len() != kernel.nrows() {
            return Err(SvmError::LengthMismatch {
                expected: kernel.nrows(),
                found: labels.len(),
            });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(SvmError::BadC(c));
        }
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(SvmError::SingleClass);
        }
        let pairs: Vec<(usize, usize)> = classes
            .iter()
            .enumerate()
            .flat_map(|(a, &ca)| classes[a + 1..].iter().map(move |&cb| (ca, cb)))
            .collect();
        let subproblems = pairs
            .par_iter()
            .map(|&(first, second)| {
                let indices: Vec<usize> = (0..labels.len())
                    .filter(|&i| labels[i] == first || labels[i] == second)
                    .collect();
                let y: Vec<f64> = indices
                    .iter()
                    .map(|&i| if labels[i] == first { 1.0 } else { -1.0 })
                    .collect();
                let sub = Array2::from_shape_fn((indices.len(), indices.len()), |(a, b)| {
                    kernel[[indices[a], indices[b]]]
                });
                let sol = solve_dual(sub.view(), &y, c, options);
                BinaryModel {
                    first,
                    second,
                    coefficients: sol.alpha.iter().zip(&y).map(|(a, y)| a * y).collect(),
                    indices,
                    alpha: sol.alpha,
                    bias: sol.bias,
                    objective: sol.objective,
                    iterations: sol.iterations,
                    converged: sol.converged,
                }
            })
            .collect();
        Ok(Self {
            c,
            classes,
            training_size: labels.len(),
            subproblems,
        })
    }

    /// Training positions with a nonzero weight in any subproblem.
    pub fn support_indices(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .subproblems
            .iter()
            .flat_map(|b| b.indices.iter().zip(&b.alpha).filter(|(_, a)| **a != 0.0).map(|(i, _)| *i))
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Majority vote over subproblems; ties go to the lowest class.
    pub fn predict(&self, kernel_row: ArrayView1<'_, f64>) -> Result<usize> {
        if kernel_row.len() != self.training_size {
            return Err(SvmError::LengthMismatch {
                expected: self.training_size,
                found: kernel_row.len(),
            });
        }
        let max_class = *self.classes.last().expect("at least two classes");
        let mut votes = vec![0usize; max_class + 1];
        for b in &self.subproblems {
            votes[b.vote(kernel_row)] += 1;
        }
        let mut best = self.classes[0];
        for &c in &self.classes[1..] {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        Ok(best)
    }

    pub fn predict_rows(&self, kernel_rows: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        kernel_rows.rows().into_iter().map(|r| self.predict(r)).collect()
    }
}

/// Trains on a train x train similarity kernel.
pub fn train_svm(kernel: &SimilarityMatrix, labels: &[usize], c: f64) -> Result<SvmModel> {
    SvmModel::train(kernel.values(), labels, c, &SolverOptions::default())
}

/// Predicts from the similarities of one test instance to all training
/// instances.
pub fn predict_svm(model: &SvmModel, kernel_row: ArrayView1<'_, f64>) -> Result<usize> {
    model.predict(kernel_row)
}

/// Ordered, strictly increasing list of positive C values.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid(Vec<f64>);

impl KernelGrid {
    pub fn new(c_values: Vec<f64>) -> Result<Self> {
        if c_values.is_empty() {
            return Err(SvmError::BadGrid("empty".into()));
        }
        if let Some(c) = c_values.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(SvmError::BadGrid(format!("non-positive value {c}")));
        }
        if c_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SvmError::BadGrid("values must be strictly increasing".into()));
        }
        Ok(Self(c_values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for KernelGrid {
    /// `[0.01, 0.1, 1, 10, 100, 1000]`
    fn default() -> Self {
        Self(vec![0.01, 0.1, 1.0, 10.0, 100.0, 1000.0])
    }
}

/// Outcome of the internal cross-validated C search.
#[derive(Debug, Clone, PartialEq)]
pub struct CSelection {
    pub c: f64,
    pub folds: usize,
    /// Mean fold accuracy per grid value.
    pub cv_accuracy: Vec<f64>,
}

/// Stratified fold id per instance; 3 folds, or 2 when a class has fewer
/// than 3 members.
pub fn stratified_folds(labels: &[usize], seed: u64) -> Result<(usize, Vec<usize>)> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let present = members.iter().enumerate().filter(|(_, m)| !m.is_empty());
    let mut smallest = usize::MAX;
    for (class, m) in present.clone() {
        if m.len() < 2 {
            return Err(SvmError::ClassTooSmall { class, count: m.len() });
        }
        smallest = smallest.min(m.len());
    }
    if present.count() < 2 {
        return Err(SvmError::SingleClass);
    }
    let k = if smallest >= 3 { 3 } else { 2 };
    let mut rng = seed::rng(seed);
    let mut fold = vec![0; labels.len()];
    for m in &mut members {
        m.shuffle(&mut rng);
        for (t, &i) in m.iter().enumerate() {
            fold[i] = t % k;
        }
    }
    Ok((k, fold))
}

/// Picks the grid value with the best mean stratified-CV accuracy on the
/// training kernel; ties keep the smallest C.
pub fn select_c(kernel: &SimilarityMatrix, labels: &[usize], grid: &KernelGrid, seed: u64) -> Result<CSelection> {
    select_c_raw(kernel.values(), labels, grid, seed)
}

pub fn select_c_raw(kernel: ArrayView2<'_, f64>, labels: &[usize], grid: &KernelGrid, seed: u64) -> Result<CSelection> {
    check_kernel(kernel)?;
    if labels.len() != kernel.nrows() {
        return Err(SvmError::LengthMismatch {
            expected: kernel.nrows(),
            found: labels.len(),
        });
    }
    let (k, fold) = stratified_folds(labels, seed)?;
    let options = SolverOptions::default();
    let cv_accuracy = grid
        .values()
        .par_iter()
        .map(|&c| -> Result<f64> {
            let mut total = 0.0;
            for f in 0..k {
                let train: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
                let test: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
                let sub = Array2::from_shape_fn((train.len(), train.len()), |(a, b)| kernel[[train[a], train[b]]]);
                let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
                let model = SvmModel::train(sub.view(), &y, c, &options)?;
                let mut correct = 0;
                for &t in &test {
                    let row: Vec<f64> = train.iter().map(|&j| kernel[[t, j]]).collect();
                    if model.predict(ArrayView1::from(&row))? == labels[t] {
                        correct += 1;
                    }
                }
                total += correct as f64 / test.len() as f64;
            }
            Ok(total / k as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &acc) in cv_accuracy.iter().enumerate() {
        if acc > cv_accuracy[best] {
            best = i;
        }
    }
    Ok(CSelection {
        c: grid.values()[best],
        folds: k,
        cv_accuracy,
    })
}
