//! Early-integration baselines: ReliefF scoring, SVM-RFE ranking and the
//! rules fixing how many features to keep.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::svm::{SolverOptions, SvmError, SvmModel};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("at least 2 classes are required")]
    SingleClass,
    #[error("class {class} has {count} member(s); ReliefF with k={k} needs at least {needed}", needed = k + 1)]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("k_neighbors must be at least 1")]
    ZeroNeighbors,
    #[error("{labels} labels for {rows} rows")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("non-finite feature value at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("feature count must be at least 1")]
    NoFeatures,
    #[error("cannot select {count} of {available} features")]
    CountOutOfRange { count: usize, available: usize },
    #[error(transparent)]
    Svm(#[from] SvmError),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

/// Per-feature scores (higher is better) and the induced order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRanking {
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl FeatureRanking {
    /// Orders features by descending score, lower index first on ties.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { scores, order }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn top(&self, count: usize) -> &[usize] {
        &self.order[..count]
    }

    /// `feature_index,feature_name,score,rank` rows, best first.
    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[String]) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature_index", "feature_name", "score", "rank"])?;
        for (rank, &f) in self.order.iter().enumerate() {
            w.write_record([
                f.to_string(),
                feature_names.get(f).cloned().unwrap_or_default(),
                self.scores[f].to_string(),
                (rank + 1).to_string(),
            ])?;
        }
        w.flush()
    }
}

fn check_inputs(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if labels.len() != features.nrows() {
        return Err(SelectionError::LengthMismatch {
            rows: features.nrows(),
            labels: labels.len(),
        });
    }
    if let Some(((i, j), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(SelectionError::NonFinite(i, j));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    if members.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(SelectionError::SingleClass);
    }
    Ok(members)
}

/// Indices of the `k` nearest candidates to `i` under `dist`, ties by index.
fn nearest(i: usize, candidates: &[usize], k: usize, dist: &impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (dist(i, j), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Hits of one instance, then (prior weight, misses) per other class.
type Neighbours = (Vec<usize>, Vec<(f64, Vec<usize>)>);

/// ReliefF weights over every instance.
///
/// Features are min-max normalized, neighbours found by L1 distance. Each
/// instance pulls weights down by its `k` nearest hits and up by its `k`
/// nearest misses from every other class, the latter weighted by
/// `P(class) / (1 - P(own class))`.
pub fn relief_scores(features: ArrayView2<'_, f64>, labels: &[usize], k_neighbors: usize) -> Result<FeatureRanking> {
    let members = check_inputs(features, labels)?;
    if k_neighbors == 0 {
        return Err(SelectionError::ZeroNeighbors);
    }
    for (class, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < k_neighbors + 1 {
            return Err(SelectionError::ClassTooSmall {
                class,
                count: m.len(),
                k: k_neighbors,
            });
        }
    }
    let (n, p) = features.dim();
    let mut scaled = Array2::<f64>::zeros((n, p));
    for (j, col) in features.axis_iter(Axis(1)).enumerate() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            for (i, &v) in col.iter().enumerate() {
                scaled[[i, j]] = (v - lo) / range;
            }
        }
    }
    let dist = |a: usize, b: usize| -> f64 {
        scaled
            .row(a)
            .iter()
            .zip(scaled.row(b))
            .map(|(x, y)| (x - y).abs())
            .sum()
    };
    let priors: Vec<f64> = members.iter().map(|m| m.len() as f64 / n as f64).collect();

    // neighbour search in parallel, accumulation serially in instance order
    let neighbours: Vec<Neighbours> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            let hits = nearest(i, &members[own], k_neighbors, &dist);
            let misses = members
                .iter()
                .enumerate()
                .filter(|(c, m)| *c != own && !m.is_empty())
                .map(|(c, m)| (priors[c] / (1.0 - priors[own]), nearest(i, m, k_neighbors, &dist)))
                .collect();
            (hits, misses)
        })
        .collect();

    let norm = (n * k_neighbors) as f64;
    let mut weights = vec![0.0; p];
    for (i, (hits, misses)) in neighbours.iter().enumerate() {
        let xi = scaled.row(i);
        for &h in hits {
            for (w, (a, b)) in weights.iter_mut().zip(xi.iter().zip(scaled.row(h))) {
                *w -= (a - b).abs() / norm;
            }
        }
        for (factor, ms) in misses {
            for &m in ms {
                for (w, (a, b)) in weights.iter_mut().zip(xi.iter().zip(scaled.row(m))) {
                    *w += factor * (a - b).abs() / norm;
                }
            }
        }
    }
    Ok(FeatureRanking::from_scores(weights))
}

/// Zero-mean, unit-variance columns; constant columns become `None`.
fn standardize(features: ArrayView2<'_, f64>) -> Vec<Option<Vec<f64>>> {
    let n = features.nrows() as f64;
    features
        .axis_iter(Axis(1))
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (var > 0.0).then(|| {
                let sd = var.sqrt();
                col.iter().map(|v| (v - mean) / sd).collect()
            })
        })
        .collect()
}

/// SVM recursive feature elimination.
///
/// Features are standardized; each round trains a linear-kernel SVM (C = 1)
/// on the survivors, scores each feature by `sum |w_f|` over the one-vs-one
/// machines and drops the weaker half (at least one). Constant features are
/// eliminated before the first round. The ranking is the reverse of the
/// elimination order; the score of a feature is `p - position`.
pub fn svmrfe_rank(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<FeatureRanking> {
    check_inputs(features, labels)?;
    let p = features.ncols();
    if p == 0 {
        return Err(SelectionError::NoFeatures);
    }
    let columns = standardize(features);
    let n = features.nrows();
    let options = SolverOptions::default();

    let mut eliminated: Vec<usize> = (0..p).rev().filter(|&f| columns[f].is_none()).collect();
    let mut surviving: Vec<usize> = (0..p).filter(|&f| columns[f].is_some()).collect();
    while !surviving.is_empty() {
        if surviving.len() == 1 {
            eliminated.push(surviving[0]);
            break;
        }
        let data = Array2::from_shape_fn((n, surviving.len()), |(i, s)| {
            columns[surviving[s]].as_ref().expect("survivors vary")[i]
        });
        let kernel = data.dot(&data.t());
        let model = SvmModel::train(kernel.view(), labels, 1.0, &options)?;
        let mut magnitude = vec![0.0; surviving.len()];
        for b in &model.subproblems {
            let mut w = vec![0.0; surviving.len()];
            for (&i, &coef) in b.indices.iter().zip(&b.coefficients) {
                if coef != 0.0 {
                    for (ws, x) in w.iter_mut().zip(data.row(i)) {
                        *ws += coef * x;
                    }
                }
            }
            for (m, ws) in magnitude.iter_mut().zip(w) {
                *m += ws.abs();
            }
        }
        let drop = (surviving.len() / 2).max(1);
        // weakest first; among equals the higher index goes first
        let mut by_weakness: Vec<usize> = (0..surviving.len()).collect();
        by_weakness.sort_by(|&a, &b| {
            magnitude[a]
                .total_cmp(&magnitude[b])
                .then(surviving[b].cmp(&surviving[a]))
        });
        let dropped: Vec<usize> = by_weakness[..drop].iter().map(|&s| surviving[s]).collect();
        eliminated.extend(&dropped);
        surviving.retain(|f| !dropped.contains(f));
    }
    let mut scores = vec![0.0; p];
    for (position, &f) in eliminated.iter().rev().enumerate() {
        scores[f] = (p - position) as f64;
    }
    Ok(FeatureRanking::from_scores(scores))
}

/// Number of features kept out of `p`:
///
/// | p              | kept            |
/// |----------------|-----------------|
/// | p < 10         | round(0.75 p)   |
/// | 10 <= p < 75   | round(0.40 p)   |
/// | 75 <= p < 100  | round(0.10 p)   |
/// | 100 <= p < 1000| round(0.03 p)   |
/// | p >= 1000      | 25              |
///
/// The result is at least 1.
pub fn select_count(p: usize) -> Result<usize> {
    if p == 0 {
        return Err(SelectionError::NoFeatures);
    }
    let pf = p as f64;
    let count = match p {
        0..10 => (0.75 * pf).round() as usize,
        10..75 => (0.40 * pf).round() as usize,
        75..100 => (0.10 * pf).round() as usize,
        100..1000 => (0.03 * pf).round() as usize,
        _ => 25,
    };
    Ok(count.max(1))
}

/// Keeps the top `count` features of `ranking`, best first.
pub fn apply_selection(features: ArrayView2<'_, f64>, ranking: &FeatureRanking, count: usize) -> Result<Array2<f64>> {
    let available = features.ncols();
    if count == 0 || count > available || ranking.order.len() != available {
        return Err(SelectionError::CountOutOfRange { count, available });
    }
    Ok(features.select(Axis(1), ranking.top(count)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::{array, s, Array2};
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn count_rules() {
        assert_eq!(select_count(6746).unwrap(), 25);
        assert_eq!(select_count(309).unwrap(), 9);
        assert_eq!(select_count(8).unwrap(), 6);
        assert_eq!(select_count(1).unwrap(), 1);
        assert_eq!(select_count(9).unwrap(), 7);
        assert_eq!(select_count(10).unwrap(), 4);
        assert_eq!(select_count(74).unwrap(), 30);
        assert_eq!(select_count(75).unwrap(), 8);
        assert_eq!(select_count(99).unwrap(), 10);
        assert_eq!(select_count(100).unwrap(), 3);
        assert_eq!(select_count(999).unwrap(), 30);
        assert_eq!(select_count(1000).unwrap(), 25);
        assert!(select_count(0).is_err());
    }

    /// Brute-force ReliefF on a 10-point fixture: column 0 copies the label,
    /// column 1 is noise.
    #[test]
    fn relief_label_copy_ranks_first() {
        let mut rng = seed::rng(8);
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= 5)).collect();
        let x = Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { labels[i] as f64 } else { rng.random::<f64>() });
        let r = relief_scores(x.view(), &labels, 3).unwrap();
        assert_eq!(r.order(), [0, 1]);
        // hits never differ on the copy, misses always differ by the full range
        assert!((r.scores()[0] - 1.0).abs() < 1e-12);

        // independent recomputation of the noise weight
        let lo = x.column(1).iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.column(1).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: Vec<f64> = x.column(1).iter().map(|v| (v - lo) / (hi - lo)).collect();
        let mut w = 0.0;
        for i in 0..10 {
            let d = |j: usize| (labels[i] as f64 - labels[j] as f64).abs() + (z[i] - z[j]).abs();
            let mut hits: Vec<usize> = (0..10).filter(|&j| j != i && labels[j] == labels[i]).collect();
            let mut misses: Vec<usize> = (0..10).filter(|&j| labels[j] != labels[i]).collect();
            hits.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            misses.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            for &h in &hits[..3] {
                w -= (z[i] - z[h]).abs() / 30.0;
            }
            for &m in &misses[..3] {
                w += (z[i] - z[m]).abs() / 30.0;
            }
        }
        assert!((r.scores()[1] - w).abs() < 1e-12);
    }

    #[test]
    fn relief_constant_features_score_zero() {
        let x = Array2::from_elem((6, 4), 3.5);
        let r = relief_scores(x.view(), &[0, 0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.scores(), [0.0; 4]);
        assert_eq!(r.order(), [0, 1, 2, 3]);
    }

    #[test]
    fn relief_duplicate_columns_tie() {
        let mut rng = seed::rng(3);
        let mut x = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>());
        let c0 = x.column(0).to_owned();
        x.column_mut(2).assign(&c0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let r = relief_scores(x.view(), &labels, 2).unwrap();
        assert_eq!(r.scores()[0], r.scores()[2]);
    }

    #[test]
    fn relief_errors() {
        let x = Array2::zeros((4, 2));
        assert!(matches!(
            relief_scores(x.view(), &[0, 0, 0, 1], 1),
            Err(SelectionError::ClassTooSmall { class: 1, .. })
        ));
        assert!(matches!(relief_scores(x.view(), &[0, 0, 0, 0], 1), Err(SelectionError::SingleClass)));
    }

    fn informative_fixture(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((20, 4), |(i, j)| {
            let sign = if labels[i] == 0 { -1.0 } else { 1.0 };
            match j {
                0 | 2 => sign + noise.sample(&mut rng),
                _ => noise.sample(&mut rng),
            }
        });
        (x, labels)
    }

    #[test]
    fn svmrfe_informative_above_noise() {
        for seed in 0..5 {
            let (x, y) = informative_fixture(seed);
            let r = svmrfe_rank(x.view(), &y).unwrap();
            let top: Vec<usize> = r.top(2).to_vec();
            assert!(top.contains(&0) && top.contains(&2), "seed {seed}: {:?}", r.order());
        }
    }

    #[test]
    fn svmrfe_single_feature_and_constant_last() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(svmrfe_rank(x.view(), &[0, 0, 1, 1]).unwrap().order(), [0]);
        let x = array![[1.0, 5.0, 0.0], [2.0, 5.0, 1.0], [3.0, 5.0, 0.5], [4.0, 5.0, 0.2]];
        let r = svmrfe_rank(x.view(), &[0, 0, 1, 1]).unwrap();
        assert_eq!(*r.order().last().unwrap(), 1);
    }

    #[test]
    fn svmrfe_permutation_equivariant() {
        let (x, y) = informative_fixture(11);
        let perm = [2, 0, 3, 1];
        let xp = x.select(Axis(1), &perm);
        let a = svmrfe_rank(x.view(), &y).unwrap();
        let b = svmrfe_rank(xp.view(), &y).unwrap();
        let mapped: Vec<usize> = b.order().iter().map(|&f| perm[f]).collect();
        assert_eq!(mapped, a.order());
    }

    #[test]
    fn selection_bounds() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let r = FeatureRanking::from_scores(vec![0.1, 0.9, 0.5]);
        assert_eq!(apply_selection(x.view(), &r, 3).unwrap(), array![[2.0, 3.0, 1.0], [5.0, 6.0, 4.0]]);
        assert_eq!(apply_selection(x.view(), &r, 1).unwrap(), x.slice(s![.., 1..2]));
        assert!(apply_selection(x.view(), &r, 4).is_err());
        assert!(apply_selection(x.view(), &r, 0).is_err());
    }

    #[test]
    fn ranking_csv() {
        let r = FeatureRanking::from_scores(vec![0.5, 2.0]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "feature_index,feature_name,score,rank\n1,b,2,1\n0,a,0.5,2\n"
        );
    }

    proptest! {
        #[test]
        fn select_count_total_and_banded_monotone(p in 1usize..5000) {
            let c = select_count(p).unwrap();
            prop_assert!(c >= 1 && c <= p);
            let band = |p: usize| match p { 0..10 => 0, 10..75 => 1, 75..100 => 2, 100..1000 => 3, _ => 4 };
            if band(p + 1) == band(p) {
                prop_assert!(select_count(p + 1).unwrap() >= c);
            }
        }

        #[test]
        fn relief_scores_in_unit_range(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let x = Array2::from_shape_fn((15, 4), |_| rng.random_range(-5.0..5.0));
            let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
            let r = relief_scores(x.view(), &labels, 3).unwrap();
            prop_assert!(r.scores().iter().all(|s| (-1.0..=1.0).contains(s)));
        }
    }
}
