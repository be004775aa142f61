//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rfdiss::dataset::{make_split_plan, MultiViewDataset, Split};
use rfdiss::dissimilarity::{build_matrix, build_square, joint_average, DissimilarityMatrix};
use rfdiss::evaluation::{run_protocol, sign_test, summarize};
use rfdiss::feature_selection::select_count;
use rfdiss::forest::{Forest, ForestConfig, Node, Tree};
use rfdiss::pipelines::{run_methods, MethodId, PipelineConfig, PipelineResult, SplitContext};
use rfdiss::seed;
use rfdiss::svm::{solve_dual, SolverOptions, SvmModel};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------------------
// 1. matrix invariants

fn matrix_invariants(d: &DissimilarityMatrix, m: usize, what: &str) -> Result<(), String> {
    d.check_square_invariants().map_err(|e| format!("{what}: {e}"))?;
    check(d.is_on_grid(m), || format!("{what}: entry off the 1/{m} grid"))
}

fn dataset_invariants(ds: &MultiViewDataset, split: &Split, m: usize, seed_value: u64) -> Result<(), String> {
    let mut cfg = PipelineConfig::default();
    cfg.forest.num_trees = m;
    cfg.seed = seed_value;
    let ctx = SplitContext::new(ds, split, &cfg).map_err(|e| e.to_string())?;
    let views = ctx.view_train_matrices().map_err(|e| e.to_string())?;
    for (q, d) in views.iter().enumerate() {
        matrix_invariants(d, m, &format!("{} view {q}", ds.name()))?;
    }
    let (joint, test) = ctx.joint_matrices().map_err(|e| e.to_string())?;
    // the joint matrix averages Q grids of step 1/M
    matrix_invariants(&joint, m * views.len(), &format!("{} joint", ds.name()))?;
    check(test.values().iter().all(|v| (0.0..=1.0).contains(v)), || "test rows out of range".into())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut max_n = 0;
    for g in 0..50u64 {
        let ds = rfdiss::synth::random_small(g);
        let m = 1 + seed::rng(seed::derive(1, g)).random_range(0..50usize);
        // whole dataset as training rows
        let all = Split {
            train: (0..ds.num_instances()).collect(),
            test: vec![],
        };
        let ids = &all.train;
        let mut per_view = Vec::new();
        for (q, view) in ds.views().iter().enumerate() {
            let cfg = ForestConfig {
                num_trees: m,
                seed: seed::derive(g, q as u64),
                ..ForestConfig::default()
            };
            let f = Forest::train(view.features(), ds.labels(), ds.num_classes(), &cfg).map_err(|e| e.to_string())?;
            let d = build_square(&f, view.features(), ids).map_err(|e| e.to_string())?;
            matrix_invariants(&d, m, &format!("{} view {q}", ds.name()))?;
            per_view.push(d);
        }
        let joint = joint_average(&per_view).map_err(|e| e.to_string())?;
        matrix_invariants(&joint, m * per_view.len(), &format!("{} joint", ds.name()))?;
        // and on a training partition
        let split = make_split_plan(&ds, 1, 0.5, g).map_err(|e| e.to_string())?.repetitions.remove(0);
        dataset_invariants(&ds, &split, m, g)?;
        max_n = max_n.max(ds.num_instances());
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("50 datasets, N <= {max_n}, Q <= 4, M <= 50"))
}

// ---------------------------------------------------------------------------
// 2. brute-force oracle

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

fn oracle_matrix(forest: &Forest, rows: &Array2<f64>, cols: &Array2<f64>) -> Array2<f64> {
    let table = |x: &Array2<f64>| -> Vec<Vec<usize>> {
        forest
            .trees()
            .iter()
            .map(|t| x.rows().into_iter().map(|r| walk(t, r)).collect())
            .collect()
    };
    let (lr, lc) = (table(rows), table(cols));
    let m = forest.num_trees();
    Array2::from_shape_fn((rows.nrows(), cols.nrows()), |(i, j)| {
        (0..m).filter(|&t| lr[t][i] != lc[t][j]).count() as f64 / m as f64
    })
}

fn criterion_2() -> Outcome {
    for case in 0..100u64 {
        let mut rng = seed::rng(seed::derive(2024, case));
        let n = rng.random_range(3..=20usize);
        let p = rng.random_range(1..=4usize);
        let m = rng.random_range(1..=5usize);
        let classes = rng.random_range(2..=3usize);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(0..5u32) as f64);
        let y: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
        let cfg = ForestConfig {
            num_trees: m,
            seed: case,
            ..ForestConfig::default()
        };
        let forest = Forest::train(x.view(), &y, classes, &cfg).map_err(|e| e.to_string())?;
        let ids: Vec<usize> = (0..n).collect();
        let got = build_square(&forest, x.view(), &ids).map_err(|e| e.to_string())?;
        check(got.values() == oracle_matrix(&forest, &x, &x).view(), || format!("case {case}: square differs"))?;
        let probe = Array2::from_shape_fn((4, p), |_| rng.random_range(0..6u32) as f64);
        let got = build_matrix(&forest, probe.view(), &[100, 101, 102, 103], x.view(), &ids).map_err(|e| e.to_string())?;
        check(got.values() == oracle_matrix(&forest, &probe, &x).view(), || format!("case {case}: cross differs"))?;
    }
    Ok("100 random forests, exact equality".into())
}

// ---------------------------------------------------------------------------
// 3. SVM solver against a reference QP

/// Augmented-Lagrangian coordinate descent on the dual
/// min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0.
fn reference_dual(k: &Array2<f64>, y: &[f64], c: f64) -> Vec<f64> {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * k[[i, j]];
    let rho = 10.0;
    let mut lambda = 0.0;
    let mut a = vec![0.0; n];
    for _outer in 0..2000 {
        for _sweep in 0..200 {
            let mut moved = 0.0f64;
            for i in 0..n {
                let ya: f64 = (0..n).map(|j| y[j] * a[j]).sum();
                let grad = (0..n).map(|j| q(i, j) * a[j]).sum::<f64>() - 1.0 + lambda * y[i] + rho * y[i] * ya;
                let curv = q(i, i) + rho;
                let next = (a[i] - grad / curv).clamp(0.0, c);
                moved = moved.max((next - a[i]).abs());
                a[i] = next;
            }
            if moved < 1e-13 {
                break;
            }
        }
        let ya: f64 = (0..n).map(|j| y[j] * a[j]).sum();
        lambda += rho * ya;
        if ya.abs() < 1e-12 {
            break;
        }
    }
    a
}

fn objective(k: &Array2<f64>, y: &[f64], a: &[f64]) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += a[i] * a[j] * y[i] * y[j] * k[[i, j]];
        }
    }
    0.5 * quad - a.iter().sum::<f64>()
}

fn reference_bias(k: &Array2<f64>, y: &[f64], a: &[f64], c: f64) -> f64 {
    let n = y.len();
    let f = |i: usize| (0..n).map(|j| a[j] * y[j] * k[[i, j]]).sum::<f64>();
    let free: Vec<usize> = (0..n).filter(|&i| a[i] > 1e-6 * c && a[i] < c * (1.0 - 1e-6)).collect();
    if !free.is_empty() {
        return free.iter().map(|&i| y[i] - f(i)).sum::<f64>() / free.len() as f64;
    }
    // no free vector: middle of the feasible interval
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..n {
        let b = y[i] - f(i);
        let at_upper = a[i] >= c * (1.0 - 1e-6);
        // y_i (f_i + b) >= 1 when a_i = 0, <= 1 when a_i = C
        if (y[i] > 0.0) != at_upper {
            lo = lo.max(b);
        } else {
            hi = hi.min(b);
        }
    }
    (lo + hi) / 2.0
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for case in 0..30u64 {
        let mut rng = seed::rng(seed::derive(333, case));
        let n = rng.random_range(4..=15usize);
        let test = 20;
        let dim = rng.random_range(1..=3usize);
        // two shifted clouds, some overlap
        let labels: Vec<usize> = (0..n + test).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
        let pts: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..dim).map(|_| rng.random::<f64>() * 2.0 + l as f64).collect())
            .collect();
        let rbf = case % 2 == 0;
        let kern = |a: &[f64], b: &[f64]| {
            if rbf {
                (-a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp()
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
            }
        };
        let full = Array2::from_shape_fn((n + test, n), |(i, j)| kern(&pts[i], &pts[j]));
        let k = full.slice(ndarray::s![..n, ..]).to_owned();
        let y: Vec<f64> = labels[..n].iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect();
        let c = [0.1, 1.0, 10.0][case as usize % 3];

        let sol = solve_dual(k.view(), &y, c, &SolverOptions::default());
        let reference = reference_dual(&k, &y, c);
        let gap = (objective(&k, &y, &sol.alpha) - objective(&k, &y, &reference)).abs();
        worst = worst.max(gap);
        check(gap <= 1e-4, || format!("case {case}: objective gap {gap:e}"))?;

        let model = SvmModel::train(k.view(), &labels[..n], c, &SolverOptions::default()).map_err(|e| e.to_string())?;
        let b = reference_bias(&k, &y, &reference, c);
        for i in 0..n + test {
            let row = full.row(i);
            let dec: f64 = (0..n).map(|j| reference[j] * y[j] * row[j]).sum::<f64>() + b;
            let want = if dec > 0.0 { 0 } else { 1 };
            let got = model.predict(row).map_err(|e| e.to_string())?;
            check(got == want, || format!("case {case}: prediction {i} differs (reference decision {dec:e})"))?;
            checked += 1;
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("30 problems, worst objective gap {worst:.1e}, {checked} predictions equal"))
}

// ---------------------------------------------------------------------------
// 4. sign-test critical values

/// Pascal's triangle row `n` as exact integers.
fn pascal(n: usize) -> Vec<u64> {
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = vec![1u64; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    row
}

fn criterion_4() -> Outcome {
    let mut cells = 0;
    for n in 2..=12usize {
        let row = pascal(n);
        let total = 1u64 << n;
        let base = vec![0.0; n];
        let challenger = vec![1.0; n];
        let t = sign_test(MethodId::RelfRf, MethodId::Rfsvm, &base, &challenger, &[0.10, 0.05, 0.01])
            .map_err(|e| e.to_string())?;
        for alpha in [0.10, 0.05, 0.01] {
            // smallest w with sum_{k >= w} C(n, k) <= alpha * 2^n
            let expected = (0..=n + 1)
                .find(|&w| (row[w.min(n + 1)..].iter().sum::<u64>() as f64) <= alpha * total as f64)
                .unwrap_or(n + 1);
            let got = t.critical_value(alpha).ok_or("missing alpha")?;
            check(got == expected, || format!("n={n}, alpha={alpha}: {got} vs {expected}"))?;
            cells += 1;
        }
    }
    let t7 = sign_test(MethodId::RelfRf, MethodId::Rfsvm, &[0.0; 7], &[1.0; 7], &[0.05]).map_err(|e| e.to_string())?;
    check(t7.critical_value(0.05) == Some(7), || "n=7, alpha=0.05 is not 7".into())?;
    Ok(format!("{cells} (n, alpha) cells exact; n=7, alpha=0.05 -> 7"))
}

// ---------------------------------------------------------------------------
// 5. feature-count rules

fn criterion_5() -> Outcome {
    let cases = [
        (6746, 25),
        (309, 9),
        (8, 6),
        (1, 1),
        (2, 2),
        (9, 7),
        (10, 4),
        (74, 30),
        (75, 8),
        (99, 10),
        (100, 3),
        (999, 30),
        (1000, 25),
        (100_000, 25),
    ];
    for (p, want) in cases {
        let got = select_count(p).map_err(|e| e.to_string())?;
        check(got == want, || format!("p={p}: {got}, expected {want}"))?;
    }
    check(select_count(0).is_err(), || "p=0 accepted".into())?;
    Ok(format!("{} cases including band boundaries", cases.len()))
}

// ---------------------------------------------------------------------------
// 6 and 9. CLI determinism

fn cli_raw_csv(dir: &Path, name: &str, datasets: &[&str], extra: &[&str]) -> Result<Vec<u8>, String> {
    let out = dir.join(name);
    let mut args = vec!["run".to_string(), "--seed".into(), "42".into(), "--out".into(), out.display().to_string()];
    for d in datasets {
        args.push("--dataset".into());
        args.push(d.to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let o = Command::new(env!("CARGO_BIN_EXE_rfdiss"))
        .args(&args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .map_err(|e| e.to_string())?;
    check(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    fs::read(out.join("raw_accuracies.csv")).map_err(|e| e.to_string())
}

fn determinism(datasets: &[&str]) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = cli_raw_csv(dir.path(), "first", datasets, &[])?;
    let b = cli_raw_csv(dir.path(), "second", datasets, &[])?;
    check(a == b, || "raw accuracy CSVs differ".into())?;
    Ok(a.len())
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let suite = [
        "fixtures/toy/manifest.txt",
        "fixtures/single_view/manifest.txt",
        "synth:lsvt_like:1",
        "synth:correlated_views:2",
    ];
    let bytes = determinism(&suite)?;
    within(Duration::from_secs(300), start)?;
    Ok(format!("{} datasets, default protocol, {bytes} identical bytes", suite.len()))
}

// ---------------------------------------------------------------------------
// 7. ordering on correlated synthetic views

fn criterion_7() -> Outcome {
    let methods = [MethodId::RelfRf, MethodId::Rfsvm, MethodId::Rfdis];
    let mut holds = 0;
    let mut lines = Vec::new();
    for g in 0..10u64 {
        let ds = rfdiss::synth::correlated_views(g);
        let plan = make_split_plan(&ds, 10, 0.5, g).map_err(|e| e.to_string())?;
        let cfg = PipelineConfig::default().with_seed(g);
        let run = run_protocol(&ds, &methods, &plan, &cfg).map_err(|e| e.to_string())?;
        let s = summarize(&run.table).map_err(|e| e.to_string())?;
        let (relf, rfsvm, rfdis) = (s[0].mean_pct, s[1].mean_pct, s[2].mean_pct);
        if rfsvm >= relf && rfdis >= relf {
            holds += 1;
        }
        lines.push(format!("{rfsvm:.1}/{rfdis:.1}/{relf:.1}"));
    }
    check(holds >= 8, || format!("ordering held on {holds}/10 ({})", lines.join(" ")))?;
    Ok(format!("ordering held on {holds}/10 generations (RFSVM/RFDIS/RELF: {})", lines.join(" ")))
}

// ---------------------------------------------------------------------------
// 8. leakage

fn mutate_test_labels(ds: &MultiViewDataset, split: &Split, seed_value: u64) -> MultiViewDataset {
    let mut labels = ds.labels().to_vec();
    let mut rng = seed::rng(seed_value);
    for &i in &split.test {
        labels[i] = (labels[i] + 1 + rng.random_range(0..ds.num_classes() - 1)) % ds.num_classes();
    }
    MultiViewDataset::new(ds.name(), ds.views().to_vec(), labels, ds.class_names().to_vec()).expect("same shape")
}

fn same_training(a: &PipelineResult, b: &PipelineResult) -> Result<(), String> {
    check(a.models == b.models, || format!("{}: trained models changed", a.method))?;
    check(a.metadata.selected_features == b.metadata.selected_features, || {
        format!("{}: selected features changed", a.method)
    })?;
    check(a.metadata.chosen_c == b.metadata.chosen_c, || format!("{}: chosen C changed", a.method))?;
    check(a.predictions == b.predictions, || format!("{}: predictions changed", a.method))
}

fn leakage(ds: &MultiViewDataset, trees: usize, seed_value: u64) -> Result<usize, String> {
    let split = make_split_plan(ds, 1, 0.5, seed_value).map_err(|e| e.to_string())?.repetitions.remove(0);
    let mut cfg = PipelineConfig::default().with_seed(seed_value);
    cfg.forest.num_trees = trees;
    let clean = run_methods(ds, &split, &cfg, &MethodId::ALL).map_err(|(m, e)| format!("{m}: {e}"))?;
    let mutated = mutate_test_labels(ds, &split, seed_value);
    let dirty = run_methods(&mutated, &split, &cfg, &MethodId::ALL).map_err(|(m, e)| format!("{m}: {e}"))?;
    for (a, b) in clean.iter().zip(&dirty) {
        same_training(a, b)?;
    }
    Ok(clean.len())
}

fn criterion_8() -> Outcome {
    let mut checked = 0;
    for (g, ds) in [rfdiss::synth::toy(3), rfdiss::synth::lsvt_like(4), rfdiss::synth::random_small(5)]
        .iter()
        .enumerate()
    {
        checked += leakage(ds, 100, g as u64)?;
    }
    Ok(format!("{checked} pipeline runs unchanged under test-label mutation"))
}

// ---------------------------------------------------------------------------
// 9. radiomics-shaped fixture

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let ds = rfdiss::synth::radiomics_like(0);
    check(ds.num_instances() == 84 && ds.num_views() == 5 && ds.total_features() == 6746, || {
        "fixture shape".into()
    })?;
    // end to end with the default protocol
    let plan = make_split_plan(&ds, 10, 0.5, 7).map_err(|e| e.to_string())?;
    let run = run_protocol(&ds, &MethodId::ALL, &plan, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let s = summarize(&run.table).map_err(|e| e.to_string())?;
    let protocol_time = start.elapsed();
    // criterion 1 on it
    dataset_invariants(&ds, &plan.repetitions[0], 500, 7)?;
    // criterion 8 on it
    leakage(&ds, 500, 8)?;
    // criterion 6 on it
    determinism(&["synth:radiomics_like:0"])?;
    within(Duration::from_secs(600), start)?;
    let cells: Vec<String> = s.iter().map(|m| format!("{} {:.1}", m.method, m.mean_pct)).collect();
    Ok(format!(
        "protocol {:.0}s; invariants, leakage and determinism hold; {}",
        protocol_time.as_secs_f64(),
        cells.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("matrix invariants on 50 random datasets", criterion_1),
        ("build_matrix equals brute-force leaf tables", criterion_2),
        ("SVM dual matches reference QP", criterion_3),
        ("sign-test critical values are exact", criterion_4),
        ("feature-count rules", criterion_5),
        ("CLI runs are byte-identical", criterion_6),
        ("RFSVM and RFDIS >= RELF+RF on correlated views", criterion_7),
        ("test labels never reach training", criterion_8),
        ("radiomics-shaped fixture end to end", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {}. {name} [{secs:.1}s]: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {}. {name} [{secs:.1}s]: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
