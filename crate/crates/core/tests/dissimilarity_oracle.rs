use ndarray::{Array2, ArrayView1};
use proptest::prelude::*;
use rand::Rng;
use rfdiss::dissimilarity::{build_matrix, build_square, joint_average, to_similarity};
use rfdiss::forest::{Forest, ForestConfig, Node, Tree};
use rfdiss::seed;

/// Walks the node arena directly, without the library's leaf lookup.
fn walk(tree: &Tree, x: ArrayView1<'_, f64>) -> usize {
    let mut at = 0;
    loop {
        match &tree.nodes()[at] {
            Node::Internal {
                feature,
                threshold,
                left,
                right,
            } => at = if x[*feature] <= *threshold { *left } else { *right },
            Node::Leaf { leaf_id, .. } => return *leaf_id,
        }
    }
}

/// Explicit leaf table, one row per tree, then pairwise counting.
fn brute_force(forest: &Forest, rows: &Array2<f64>, cols: &Array2<f64>) -> Array2<f64> {
    let leaves_r: Vec<Vec<usize>> = forest
        .trees()
        .iter()
        .map(|t| rows.rows().into_iter().map(|r| walk(t, r)).collect())
        .collect();
    let leaves_c: Vec<Vec<usize>> = forest
        .trees()
        .iter()
        .map(|t| cols.rows().into_iter().map(|c| walk(t, c)).collect())
        .collect();
    let m = forest.num_trees() as f64;
    Array2::from_shape_fn((rows.nrows(), cols.nrows()), |(i, j)| {
        let differ = (0..forest.num_trees())
            .filter(|&t| leaves_r[t][i] != leaves_c[t][j])
            .count();
        differ as f64 / m
    })
}

fn random_table(rng: &mut seed::Rng, n: usize, p: usize, levels: u32) -> Array2<f64> {
    // few distinct levels so ties and shared leaves are common
    Array2::from_shape_fn((n, p), |_| rng.random_range(0..levels) as f64)
}

#[test]
fn hundred_random_forests_match_the_leaf_tables() {
    for case in 0..100u64 {
        let mut rng = seed::rng(seed::derive(77, case));
        let n = rng.random_range(4..=20usize);
        let p = rng.random_range(1..=5usize);
        let m = rng.random_range(1..=5usize);
        let x = random_table(&mut rng, n, p, 4);
        let y: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
        let cfg = ForestConfig {
            num_trees: m,
            seed: case,
            ..ForestConfig::default()
        };
        let forest = Forest::train(x.view(), &y, 2, &cfg).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let square = build_square(&forest, x.view(), &ids).unwrap();
        assert_eq!(square.values(), brute_force(&forest, &x, &x).view(), "case {case}");

        let k = rng.random_range(1..=6usize);
        let probe = random_table(&mut rng, k, p, 5);
        let probe_ids: Vec<usize> = (n..n + k).collect();
        let cross = build_matrix(&forest, probe.view(), &probe_ids, x.view(), &ids).unwrap();
        assert_eq!(cross.values(), brute_force(&forest, &probe, &x).view(), "case {case}");
    }
}

#[test]
fn three_instance_fixture() {
    // one stump: x <= 0.5 left, else right
    let stump = Tree::from_nodes(
        vec![
            Node::Internal {
                feature: 0,
                threshold: 0.5,
                left: 1,
                right: 2,
            },
            Node::Leaf {
                leaf_id: 0,
                class_counts: vec![2, 0],
            },
            Node::Leaf {
                leaf_id: 1,
                class_counts: vec![0, 1],
            },
        ],
        1,
    )
    .unwrap();
    let forest = Forest::from_trees(vec![stump], 2, 3).unwrap();
    let x = ndarray::array![[0.0], [0.2], [1.0]];
    let d = build_square(&forest, x.view(), &[0, 1, 2]).unwrap();
    assert_eq!(d.values(), ndarray::array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
    let s = to_similarity(&d);
    assert_eq!(s.values(), ndarray::array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matrices_satisfy_the_invariants(
        data_seed in any::<u64>(),
        n in 4usize..40,
        q in 1usize..4,
        m in 1usize..30,
    ) {
        let mut rng = seed::rng(data_seed);
        let y: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
        let ids: Vec<usize> = (0..n).collect();
        let mut per_view = Vec::new();
        for v in 0..q {
            let x = random_table(&mut rng, n, 3, 6);
            let cfg = ForestConfig { num_trees: m, seed: seed::derive(data_seed, v as u64), ..ForestConfig::default() };
            let forest = Forest::train(x.view(), &y, 2, &cfg).unwrap();
            let d = build_square(&forest, x.view(), &ids).unwrap();
            d.check_square_invariants().unwrap();
            prop_assert!(d.is_on_grid(m));
            per_view.push(d);
        }
        let joint = joint_average(&per_view).unwrap();
        joint.check_square_invariants().unwrap();
        prop_assert!(joint.is_on_grid(m * q));
        if q == 1 {
            prop_assert_eq!(&joint, &per_view[0]);
        }
        let s = to_similarity(&joint);
        for i in 0..n {
            prop_assert_eq!(s.values()[[i, i]], 1.0);
        }
    }
}
