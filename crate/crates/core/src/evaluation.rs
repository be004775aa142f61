//! Repeated-split protocol and the statistics reported over it: mean and
//! sample standard deviation, average ranks and the pairwise sign test.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::{MultiViewDataset, SplitPlan};
use crate::pipelines::{MethodId, PipelineConfig, PipelineError, PipelineResult, SplitContext};
use crate::seed;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("repetition {repetition}, method {method}: {source}")]
    Pipeline {
        repetition: usize,
        method: MethodId,
        #[source]
        source: PipelineError,
    },
    #[error("split plan covers {found} instances but the dataset has {expected}")]
    PlanMismatch { expected: usize, found: usize },
    #[error("no methods requested")]
    NoMethods,
    #[error("empty accuracy table")]
    Empty,
    #[error("missing mean accuracy for dataset {dataset}, method {method}")]
    MissingCell { dataset: usize, method: usize },
    #[error("sign test needs at least 2 datasets, got {0}")]
    TooFewDatasets(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report row {row}: {message}")]
    Malformed { row: usize, message: String },
}

pub type Result<T> = std::result::Result<T, EvaluationError>;

/// Significance levels reported by default.
pub const ALPHAS: [f64; 3] = [0.10, 0.05, 0.01];

/// Accuracies of several methods over the repetitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub dataset: String,
    pub methods: Vec<MethodId>,
    /// `accuracies[rep][m]` is the test accuracy of `methods[m]` on repetition `rep`.
    pub accuracies: Vec<Vec<f64>>,
}

impl AccuracyTable {
    pub fn num_repetitions(&self) -> usize {
        self.accuracies.len()
    }

    pub fn column(&self, method: MethodId) -> Option<Vec<f64>> {
        let m = self.methods.iter().position(|&x| x == method)?;
        Some(self.accuracies.iter().map(|row| row[m]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub table: AccuracyTable,
    /// `results[rep][m]`, same layout as the table.
    pub results: Vec<Vec<PipelineResult>>,
}

/// Seed used by all trained components of one repetition.
pub fn repetition_seed(config_seed: u64, repetition: usize) -> u64 {
    seed::derive_tagged(config_seed, "repetition", repetition as u64)
}

/// Runs every method on every split of `plan`. Repetitions run in parallel;
/// the result does not depend on scheduling or on method order.
pub fn run_protocol(
    ds: &MultiViewDataset,
    methods: &[MethodId],
    plan: &SplitPlan,
    config: &PipelineConfig,
) -> Result<ProtocolRun> {
    if methods.is_empty() {
        return Err(EvaluationError::NoMethods);
    }
    for split in &plan.repetitions {
        let found = split.train.len() + split.test.len();
        if found != ds.num_instances() {
            return Err(EvaluationError::PlanMismatch {
                expected: ds.num_instances(),
                found,
            });
        }
    }
    let outcomes: Vec<std::result::Result<Vec<PipelineResult>, EvaluationError>> = plan
        .repetitions
        .par_iter()
        .enumerate()
        .map(|(rep, split)| {
            let cfg = config.with_seed(repetition_seed(config.seed, rep));
            let wrap = |method, source| EvaluationError::Pipeline {
                repetition: rep,
                method,
                source,
            };
            let ctx = SplitContext::new(ds, split, &cfg).map_err(|e| wrap(methods[0], e))?;
            methods.iter().map(|&m| ctx.run(m).map_err(|e| wrap(m, e))).collect()
        })
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        results.push(outcome?);
    }
    let accuracies = results
        .iter()
        .map(|row: &Vec<PipelineResult>| row.iter().map(|r| r.accuracy).collect())
        .collect();
    Ok(ProtocolRun {
        table: AccuracyTable {
            dataset: ds.name().to_string(),
            methods: methods.to_vec(),
            accuracies,
        },
        results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSummary {
    pub method: MethodId,
    pub mean_pct: f64,
    /// Sample standard deviation; 0 for a single repetition.
    pub std_pct: f64,
    pub repetitions: usize,
}

impl MethodSummary {
    /// Table cell, e.g. `81.11% ± 5.04`.
    pub fn cell(&self) -> String {
        format!("{:.2}% ± {:.2}", self.mean_pct, self.std_pct)
    }
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // shifting by the first value keeps constant lists at exactly zero spread
    let origin = values.first().copied().unwrap_or(0.0);
    let offset = values.iter().map(|v| v - origin).sum::<f64>() / n;
    let mean = origin + offset;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - origin - offset).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Per-method mean and sample standard deviation, in percent.
pub fn summarize(table: &AccuracyTable) -> Result<Vec<MethodSummary>> {
    if table.accuracies.is_empty() || table.methods.is_empty() {
        return Err(EvaluationError::Empty);
    }
    Ok(table
        .methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let pct: Vec<f64> = table.accuracies.iter().map(|row| 100.0 * row[m]).collect();
            let (mean_pct, std_pct) = mean_and_std(&pct);
            MethodSummary {
                method,
                mean_pct,
                std_pct,
                repetitions: pct.len(),
            }
        })
        .collect())
}

/// Midranks of one row, rank 1 for the largest value.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Mean rank per method across datasets. `means[d][m]` is the mean accuracy
/// of method `m` on dataset `d`; `None` marks a missing cell.
pub fn average_rank(means: &[Vec<Option<f64>>]) -> Result<Vec<f64>> {
    let Some(width) = means.first().map(Vec::len) else {
        return Err(EvaluationError::Empty);
    };
    let mut totals = vec![0.0; width];
    for (d, row) in means.iter().enumerate() {
        let mut full = Vec::with_capacity(width);
        for m in 0..width {
            match row.get(m).copied().flatten() {
                Some(v) => full.push(v),
                None => return Err(EvaluationError::MissingCell { dataset: d, method: m }),
            }
        }
        for (t, r) in totals.iter_mut().zip(midranks(&full)) {
            *t += r;
        }
    }
    Ok(totals.into_iter().map(|t| t / means.len() as f64).collect())
}

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Smallest `w` with `P(X >= w) <= alpha` for `X ~ Binomial(n, 1/2)`;
/// `n + 1` when no count qualifies.
pub fn exact_critical_value(n: usize, alpha: f64) -> usize {
    let n = n as u64;
    let total = 2f64.powi(n as i32);
    let mut tail: u128 = 0;
    let mut best = n + 1;
    // walk down from the top, accumulating P(X >= w)
    for w in (0..=n).rev() {
        tail += binomial(n, w);
        if tail as f64 / total <= alpha {
            best = w;
        } else {
            break;
        }
    }
    best as usize
}

/// Normal approximation `n/2 + z_(1-alpha) * sqrt(n)/2`.
pub fn normal_critical_value(n: usize, alpha: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(1.0 - alpha);
    n as f64 / 2.0 + z * (n as f64).sqrt() / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaOutcome {
    pub alpha: f64,
    pub critical_exact: usize,
    pub critical_normal: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignTestResult {
    pub baseline: MethodId,
    pub challenger: MethodId,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub levels: Vec<AlphaOutcome>,
}

impl SignTestResult {
    pub fn n(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Wins plus half the ties, rounded down.
    pub fn adjusted_wins(&self) -> usize {
        self.wins + self.ties / 2
    }

    pub fn critical_value(&self, alpha: f64) -> Option<usize> {
        self.levels.iter().find(|l| l.alpha == alpha).map(|l| l.critical_exact)
    }

    pub fn significant(&self, alpha: f64) -> Option<bool> {
        self.levels.iter().find(|l| l.alpha == alpha).map(|l| l.significant)
    }
}

/// Sign test of `challenger` against `baseline` over per-dataset mean
/// accuracies. The exact binomial critical value decides significance.
pub fn sign_test(
    baseline: MethodId,
    challenger: MethodId,
    baseline_means: &[f64],
    challenger_means: &[f64],
    alphas: &[f64],
) -> Result<SignTestResult> {
    let n = baseline_means.len().min(challenger_means.len());
    if n < 2 || baseline_means.len() != challenger_means.len() {
        return Err(EvaluationError::TooFewDatasets(n));
    }
    if let Some(&a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(EvaluationError::BadAlpha(a));
    }
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for (b, c) in baseline_means.iter().zip(challenger_means) {
        if c > b {
            wins += 1;
        } else if c < b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let adjusted = wins + ties / 2;
    let levels = alphas
        .iter()
        .map(|&alpha| {
            let critical_exact = exact_critical_value(n, alpha);
            AlphaOutcome {
                alpha,
                critical_exact,
                critical_normal: normal_critical_value(n, alpha),
                significant: adjusted >= critical_exact,
            }
        })
        .collect();
    Ok(SignTestResult {
        baseline,
        challenger,
        wins,
        ties,
        losses,
        levels,
    })
}

/// Results of several datasets evaluated with the same methods.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub tables: Vec<AccuracyTable>,
    pub summaries: Vec<Vec<MethodSummary>>,
    /// Per method, in the order of the first table's methods.
    pub average_ranks: Vec<f64>,
    pub sign_tests: Vec<SignTestResult>,
}

impl EvaluationReport {
    /// Builds summaries, ranks and all ordered sign-test pairs. Sign tests
    /// are skipped with fewer than 2 datasets.
    pub fn build(tables: Vec<AccuracyTable>, alphas: &[f64]) -> Result<Self> {
        let Some(first) = tables.first() else {
            return Err(EvaluationError::Empty);
        };
        let methods = first.methods.clone();
        let summaries = tables.iter().map(summarize).collect::<Result<Vec<_>>>()?;
        let means: Vec<Vec<Option<f64>>> = summaries
            .iter()
            .map(|s| {
                methods
                    .iter()
                    .map(|m| s.iter().find(|x| x.method == *m).map(|x| x.mean_pct))
                    .collect()
            })
            .collect();
        let average_ranks = average_rank(&means)?;
        let mut sign_tests = Vec::new();
        if tables.len() >= 2 {
            let column = |m: usize| -> Vec<f64> { means.iter().map(|row| row[m].unwrap_or(f64::NAN)).collect() };
            for (b, &baseline) in methods.iter().enumerate() {
                for (c, &challenger) in methods.iter().enumerate() {
                    if b != c {
                        sign_tests.push(sign_test(baseline, challenger, &column(b), &column(c), alphas)?);
                    }
                }
            }
        }
        Ok(Self {
            tables,
            summaries,
            average_ranks,
            sign_tests,
        })
    }
}

/// `dataset,repetition,method,accuracy`
pub fn write_raw_csv<W: Write>(out: W, tables: &[AccuracyTable]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "repetition", "method", "accuracy"])?;
    for t in tables {
        for (rep, row) in t.accuracies.iter().enumerate() {
            for (m, acc) in t.methods.iter().zip(row) {
                w.write_record([t.dataset.clone(), rep.to_string(), m.to_string(), acc.to_string()])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, row: usize) -> Result<T> {
    record
        .get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| EvaluationError::Malformed {
            row,
            message: format!("bad or missing column {i}"),
        })
}

fn parse_method(record: &csv::StringRecord, i: usize, row: usize) -> Result<MethodId> {
    record
        .get(i)
        .unwrap_or("")
        .parse()
        .map_err(|message| EvaluationError::Malformed { row, message })
}

/// Inverse of [`write_raw_csv`]; datasets and methods keep first-seen order.
pub fn read_raw_csv<R: Read>(input: R) -> Result<Vec<AccuracyTable>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut tables: Vec<AccuracyTable> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let dataset = record.get(0).unwrap_or("").to_string();
        let rep: usize = field(&record, 1, row)?;
        let method = parse_method(&record, 2, row)?;
        let acc: f64 = field(&record, 3, row)?;
        let t = match tables.iter().position(|t| t.dataset == dataset) {
            Some(i) => &mut tables[i],
            None => {
                tables.push(AccuracyTable {
                    dataset,
                    methods: Vec::new(),
                    accuracies: Vec::new(),
                });
                tables.last_mut().expect("just pushed")
            }
        };
        let m = match t.methods.iter().position(|&x| x == method) {
            Some(m) => m,
            None => {
                t.methods.push(method);
                t.methods.len() - 1
            }
        };
        while t.accuracies.len() <= rep {
            t.accuracies.push(Vec::new());
        }
        let cells = &mut t.accuracies[rep];
        if cells.len() != m {
            return Err(EvaluationError::Malformed {
                row,
                message: "rows out of order".into(),
            });
        }
        cells.push(acc);
    }
    Ok(tables)
}

/// `dataset,method,mean_pct,std_pct,avg_rank`
pub fn write_summary_csv<W: Write>(out: W, report: &EvaluationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "method", "mean_pct", "std_pct", "avg_rank"])?;
    let methods = &report.tables[0].methods;
    for (t, summary) in report.tables.iter().zip(&report.summaries) {
        for s in summary {
            let rank = methods
                .iter()
                .position(|&m| m == s.method)
                .map(|m| report.average_ranks[m]);
            w.write_record([
                t.dataset.clone(),
                s.method.to_string(),
                format!("{:.2}", s.mean_pct),
                format!("{:.2}", s.std_pct),
                rank.map_or_else(String::new, |r| format!("{r:.2}")),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: MethodId,
    pub mean_pct: f64,
    pub std_pct: f64,
    pub avg_rank: f64,
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        rows.push(SummaryRow {
            dataset: record.get(0).unwrap_or("").to_string(),
            method: parse_method(&record, 1, row)?,
            mean_pct: field(&record, 2, row)?,
            std_pct: field(&record, 3, row)?,
            avg_rank: field(&record, 4, row)?,
        });
    }
    Ok(rows)
}

/// One row per (pair, alpha):
/// `baseline,challenger,n,wins,ties,losses,adjusted_wins,alpha,critical_exact,critical_normal,significant`
pub fn write_sign_test_csv<W: Write>(out: W, tests: &[SignTestResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "baseline",
        "challenger",
        "n",
        "wins",
        "ties",
        "losses",
        "adjusted_wins",
        "alpha",
        "critical_exact",
        "critical_normal",
        "significant",
    ])?;
    for t in tests {
        for l in &t.levels {
            w.write_record([
                t.baseline.to_string(),
                t.challenger.to_string(),
                t.n().to_string(),
                t.wins.to_string(),
                t.ties.to_string(),
                t.losses.to_string(),
                t.adjusted_wins().to_string(),
                l.alpha.to_string(),
                l.critical_exact.to_string(),
                format!("{:.4}", l.critical_normal),
                l.significant.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Inverse of [`write_sign_test_csv`].
pub fn read_sign_test_csv<R: Read>(input: R) -> Result<Vec<SignTestResult>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut grouped: BTreeMap<(MethodId, MethodId), SignTestResult> = BTreeMap::new();
    let mut order = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let baseline = parse_method(&record, 0, row)?;
        let challenger = parse_method(&record, 1, row)?;
        let entry = grouped.entry((baseline, challenger)).or_insert_with(|| {
            order.push((baseline, challenger));
            SignTestResult {
                baseline,
                challenger,
                wins: 0,
                ties: 0,
                losses: 0,
                levels: Vec::new(),
            }
        });
        entry.wins = field(&record, 3, row)?;
        entry.ties = field(&record, 4, row)?;
        entry.losses = field(&record, 5, row)?;
        entry.levels.push(AlphaOutcome {
            alpha: field(&record, 7, row)?,
            critical_exact: field(&record, 8, row)?,
            critical_normal: field(&record, 9, row)?,
            significant: field(&record, 10, row)?,
        });
    }
    Ok(order.into_iter().filter_map(|k| grouped.remove(&k)).collect())
}

/// `repetition,method,instance_index,true_label,predicted_label`
pub fn write_predictions_csv<W: Write>(out: W, ds: &MultiViewDataset, plan: &SplitPlan, run: &ProtocolRun) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["repetition", "method", "instance_index", "true_label", "predicted_label"])?;
    let names = ds.class_names();
    for (rep, (split, row)) in plan.repetitions.iter().zip(&run.results).enumerate() {
        for r in row {
            for (&i, &p) in split.test.iter().zip(&r.predictions) {
                w.write_record([
                    rep.to_string(),
                    r.method.to_string(),
                    i.to_string(),
                    names[ds.labels()[i]].clone(),
                    names[p].clone(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
