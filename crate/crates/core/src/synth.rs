//! Seeded synthetic multi-view datasets.
//!
//! Each instance gets a latent vector drawn around its class centre. Every
//! view sees that latent vector through its own noise, and a fraction of the
//! view's columns are noisy random projections of it; the rest is pure noise.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{DatasetError, MultiViewDataset, View};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    /// Instances per class.
    pub class_sizes: Vec<usize>,
    pub view_widths: Vec<usize>,
    /// Fraction of each view's columns that carry signal.
    pub informative_fraction: f64,
    pub latent_dim: usize,
    /// Scale of the class centres.
    pub separation: f64,
    /// Per-view, per-instance noise on the latent vector.
    pub view_noise: f64,
    /// Per-cell noise on informative columns.
    pub feature_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(name: impl Into<String>, class_sizes: Vec<usize>, view_widths: Vec<usize>, seed: u64) -> Self {
        Self {
            name: name.into(),
            class_sizes,
            view_widths,
            informative_fraction: 0.3,
            latent_dim: 4,
            separation: 1.0,
            view_noise: 1.0,
            feature_noise: 1.0,
            seed,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.class_sizes.iter().sum()
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

pub fn generate(spec: &SyntheticSpec) -> Result<MultiViewDataset, DatasetError> {
    let n = spec.num_instances();
    let d = spec.latent_dim.max(1);
    let mut rng = seed::rng(seed::derive_tagged(spec.seed, "synth-latent", 0));

    let centres: Vec<Vec<f64>> = (0..spec.class_sizes.len())
        .map(|_| (0..d).map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    // interleave classes so instance order carries no information
    let mut labels: Vec<usize> = spec
        .class_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let latent: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| centres[y].iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut views = Vec::with_capacity(spec.view_widths.len());
    for (q, &width) in spec.view_widths.iter().enumerate() {
        let mut rng = seed::rng(seed::derive_tagged(spec.seed, "synth-view", q as u64));
        let informative = ((width as f64 * spec.informative_fraction).round() as usize).min(width);
        let loadings: Vec<Vec<f64>> = (0..informative)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect())
            .collect();
        let view_noise = normal(spec.view_noise);
        let cell_noise = normal(spec.feature_noise);
        let mut x = Array2::<f64>::zeros((n, width));
        for i in 0..n {
            let seen: Vec<f64> = latent[i].iter().map(|z| z + view_noise.sample(&mut rng)).collect();
            for f in 0..width {
                x[[i, f]] = if f < informative {
                    let signal: f64 = loadings[f].iter().zip(&seen).map(|(a, s)| a * s).sum();
                    signal + cell_noise.sample(&mut rng)
                } else {
                    rng.sample(StandardNormal)
                };
            }
        }
        // scatter informative columns among the noise ones
        let mut perm: Vec<usize> = (0..width).collect();
        for i in (1..width).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled = x.select(ndarray::Axis(1), &perm);
        let names = (0..width).map(|f| format!("v{q}_f{f}")).collect();
        views.push(View::new(format!("view{q}"), shuffled, names)?);
    }
    let class_names = (0..spec.class_sizes.len()).map(|c| format!("c{c}")).collect();
    MultiViewDataset::new(spec.name.clone(), views, labels, class_names)
}

/// Small two-view, two-class set for smoke tests.
pub fn toy(seed: u64) -> MultiViewDataset {
    let mut spec = SyntheticSpec::new("toy", vec![16, 14], vec![6, 4], seed);
    spec.informative_fraction = 0.5;
    spec.separation = 1.5;
    generate(&spec).expect("valid spec")
}

/// Four views, 126 instances, 309 features, two unbalanced classes.
pub fn lsvt_like(seed: u64) -> MultiViewDataset {
    let mut spec = SyntheticSpec::new("lsvt_like", vec![42, 84], vec![24, 69, 182, 34], seed);
    spec.informative_fraction = 0.2;
    generate(&spec).expect("valid spec")
}

/// Five views, 84 instances, 6746 features: four wide texture-like views
/// and a narrow one.
pub fn radiomics_like(seed: u64) -> MultiViewDataset {
    let mut spec = SyntheticSpec::new("radiomics_like", vec![52, 32], vec![1680, 1680, 1680, 1680, 26], seed);
    spec.informative_fraction = 0.05;
    generate(&spec).expect("valid spec")
}

/// Correlated views with per-view noise and many weak features, where
/// aggregating over views helps more than picking a few columns.
pub fn correlated_views(seed: u64) -> MultiViewDataset {
    let mut spec = SyntheticSpec::new("correlated_views", vec![30, 30], vec![300, 300, 300, 300], seed);
    spec.informative_fraction = 0.25;
    spec.latent_dim = 3;
    spec.separation = 0.9;
    spec.view_noise = 0.8;
    spec.feature_noise = 2.0;
    generate(&spec).expect("valid spec")
}

/// Random small dataset: N in [12, 60], Q in [1, 4], 2 or 3 classes.
pub fn random_small(seed: u64) -> MultiViewDataset {
    let mut rng = seed::rng(seed::derive_tagged(seed, "synth-shape", 0));
    let classes = rng.random_range(2..=3usize);
    let n = rng.random_range(12..=60usize);
    let mut sizes = vec![n / classes; classes];
    sizes[0] += n % classes;
    let q = rng.random_range(1..=4usize);
    let widths = (0..q).map(|_| rng.random_range(1..=8usize)).collect();
    let mut spec = SyntheticSpec::new(format!("random_{seed}"), sizes, widths, seed);
    spec.informative_fraction = 0.5;
    generate(&spec).expect("valid spec")
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 5] = ["toy", "lsvt_like", "radiomics_like", "correlated_views", "random_small"];

pub fn preset(name: &str, seed: u64) -> Option<MultiViewDataset> {
    Some(match name {
        "toy" => toy(seed),
        "lsvt_like" => lsvt_like(seed),
        "radiomics_like" => radiomics_like(seed),
        "correlated_views" => correlated_views(seed),
        "random_small" => random_small(seed),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_match_the_presets() {
        let r = radiomics_like(1).shape_report();
        assert_eq!(r.num_instances, 84);
        assert_eq!(r.view_widths.len(), 5);
        assert_eq!(r.view_widths.iter().map(|v| v.1).sum::<usize>(), 6746);
        let l = lsvt_like(1);
        assert_eq!(l.shape_report().to_string().lines().next().unwrap(), "N=126, Q=4, classes=2");
        assert_eq!(l.total_features(), 309);
        assert_eq!(l.class_counts(), [42, 84]);
    }

    #[test]
    fn generation_is_seeded() {
        let a = toy(5);
        let b = toy(5);
        let c = toy(6);
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.views()[0].features(), b.views()[0].features());
        assert_ne!(a.views()[0].features(), c.views()[0].features());
    }

    #[test]
    fn random_small_stays_in_bounds() {
        for s in 0..20 {
            let ds = random_small(s);
            assert!((12..=60).contains(&ds.num_instances()));
            assert!((1..=4).contains(&ds.num_views()));
            assert!(ds.class_counts().iter().all(|&c| c >= 4));
        }
    }
}
