//! Multi-run experiments: per-run data, training, evaluation, and aggregation.
//!
//! Run `r` owns the stream `derive_seed(master_seed, r)`. From it come the
//! dataset, the split, and one training seed and one evaluation seed that
//! every method of that run shares, so method comparisons within a run are
//! paired. Nothing depends on scheduling, so any `--jobs` value gives the same
//! bytes.

use std::sync::atomic::{AtomicUsize, Ordering};

use caldrop_core::metrics::{ece_report, group_stats, EceReport, GroupStats};
use caldrop_core::predictors::{ensemble_predict_batch, mc_predict_batch};
use caldrop_core::{
    build_and_train_ensemble, derive_seed, split, train, Dataset, EnsembleConfig, Matrix64,
    Network64, PredictiveDistribution64, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig, MethodKind, MethodSpec};
use crate::error::{BenchError, Result};

/// One test-set prediction, reduced to what the tables need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub pe: f64,
    pub pe_normalized: f64,
    pub confidence: f64,
    pub correct: bool,
}

/// Evaluation of one method on one run's test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: String,
    /// Percent of test samples classified correctly.
    pub accuracy: f64,
    pub group: GroupStats,
    pub ece: EceReport<f64>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    /// One entry per method, in method order; `Err` holds the failure message.
    pub outcomes: Vec<std::result::Result<MethodRun, String>>,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(Result::is_err)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dataset: DatasetSpec,
    pub methods: Vec<MethodSpec>,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn level(&self) -> f64 {
        self.dataset.level()
    }

    /// Successful runs of method `index`, in run order.
    pub fn method_runs(&self, index: usize) -> impl Iterator<Item = &MethodRun> {
        self.runs
            .iter()
            .filter_map(move |r| r.outcomes[index].as_ref().ok())
    }

    pub fn failed_runs(&self) -> Vec<usize> {
        self.runs
            .iter()
            .filter(|r| r.failed())
            .map(|r| r.run)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    pub quiet: bool,
}

/// Seeds of run `run`: dataset, split, training, evaluation.
pub fn run_seeds(master_seed: u64, run: usize) -> [u64; 4] {
    let base = derive_seed(master_seed, run as u64);
    [0, 1, 2, 3].map(|i| derive_seed(base, i))
}

pub fn prepare_run(
    dataset: &DatasetSpec,
    test_fraction: f64,
    master_seed: u64,
    run: usize,
) -> caldrop_core::Result<(Dataset, Dataset)> {
    let [data_seed, split_seed, ..] = run_seeds(master_seed, run);
    let d = dataset.generate(data_seed)?;
    split(&d, test_fraction, split_seed)
}

/// Summarizes predictive distributions against the true labels.
pub fn summarize(
    method: &str,
    preds: &[PredictiveDistribution64],
    labels: &[usize],
    ece_bins: usize,
) -> caldrop_core::Result<MethodRun> {
    let samples: Vec<Sample> = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| Sample {
            pe: p.pe,
            pe_normalized: p.pe_normalized,
            confidence: p.confidence(),
            correct: p.predicted_class == y,
        })
        .collect();
    let correct: Vec<bool> = samples.iter().map(|s| s.correct).collect();
    let pe: Vec<f64> = samples.iter().map(|s| s.pe).collect();
    let conf: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(MethodRun {
        method: method.to_string(),
        accuracy: 100.0 * hits as f64 / samples.len().max(1) as f64,
        group: group_stats(&pe, &correct)?,
        ece: ece_report(&conf, &correct, ece_bins)?,
        samples,
    })
}

/// A trained model of either kind.
#[derive(Debug, Clone)]
pub enum Model {
    Network(Network64),
    Ensemble(caldrop_core::Ensemble64),
}

impl Model {
    pub fn to_json(&self) -> caldrop_core::Result<String> {
        match self {
            Model::Network(n) => n.to_json(),
            Model::Ensemble(e) => e.to_json(),
        }
    }

    /// Reads a network document (JSON object) or an ensemble (JSON array).
    pub fn from_json(s: &str) -> caldrop_core::Result<Self> {
        if s.trim_start().starts_with('[') {
            Ok(Model::Ensemble(caldrop_core::Ensemble64::from_json(s)?))
        } else {
            Ok(Model::Network(Network64::from_json(s)?))
        }
    }

    /// MC-Dropout predictions with `passes` passes for a network; averaged
    /// member outputs for an ensemble.
    pub fn predict(
        &self,
        x: &Matrix64,
        passes: usize,
        seed: u64,
    ) -> caldrop_core::Result<Vec<PredictiveDistribution64>> {
        match self {
            Model::Network(n) => {
                mc_predict_batch(n, x, passes, &mut ChaCha8Rng::seed_from_u64(seed))
            }
            Model::Ensemble(e) => ensemble_predict_batch(e, x),
        }
    }
}

pub fn train_method(
    spec: &MethodSpec,
    train_set: &Dataset,
    seed: u64,
) -> caldrop_core::Result<Model> {
    let spec = spec.for_classes(train_set.n_classes);
    match &spec.kind {
        MethodKind::McDropout(t) => {
            let cfg = TrainConfig { seed, ..t.clone() };
            Ok(Model::Network(train(&cfg, train_set)?))
        }
        MethodKind::Ensemble(e) => {
            let cfg = EnsembleConfig { seed, ..e.clone() };
            Ok(Model::Ensemble(build_and_train_ensemble(&cfg, train_set)?))
        }
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    dataset: &DatasetSpec,
    methods: &[MethodSpec],
    run: usize,
) -> RunResult {
    let [_, _, train_seed, eval_seed] = run_seeds(cfg.master_seed, run);
    let outcomes = match prepare_run(dataset, cfg.test_fraction, cfg.master_seed, run) {
        Err(e) => methods.iter().map(|_| Err(e.to_string())).collect(),
        Ok((train_set, test_set)) => {
            let x = test_set.features::<f64>();
            methods
                .iter()
                .map(|m| {
                    let model = train_method(m, &train_set, train_seed)?;
                    let preds = model.predict(&x, cfg.test_t, eval_seed)?;
                    summarize(&m.name, &preds, &test_set.labels, cfg.ece_bins)
                })
                .map(|r| r.map_err(|e: caldrop_core::Error| e.to_string()))
                .collect()
        }
    };
    RunResult { run, outcomes }
}

/// Runs `cfg.n_runs` independent runs of every method on `dataset`.
///
/// Runs that fail are kept in the result; the caller decides whether the
/// failure fraction is acceptable (see [`check_failures`]).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dataset: &DatasetSpec,
    methods: &[MethodSpec],
    opts: &RunOptions,
) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
    let done = AtomicUsize::new(0);
    let runs = pool.install(|| {
        (0..cfg.n_runs)
            .into_par_iter()
            .map(|run| {
                let result = run_one(cfg, dataset, methods, run);
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                if !opts.quiet {
                    let status = if result.failed() { " (failed)" } else { "" };
                    eprintln!(
                        "[level {}] run {finished}/{}{status}",
                        dataset.level(),
                        cfg.n_runs
                    );
                }
                result
            })
            .collect()
    });
    Ok(ExperimentResult {
        dataset: dataset.clone(),
        methods: methods.to_vec(),
        runs,
    })
}

pub fn check_failures(result: &ExperimentResult, allowed: f64) -> Result<()> {
    let failed = result.failed_runs().len();
    let total = result.runs.len();
    if failed as f64 > allowed * total as f64 {
        return Err(BenchError::TooManyFailures {
            failed,
            total,
            allowed,
        });
    }
    Ok(())
}

/// Mean, sample standard deviation, and count of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Stat {
                mean: None,
                std: None,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n > 1)
            .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Stat {
            mean: Some(mean),
            std,
            n,
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub label: String,
    pub runs_ok: usize,
    pub accuracy: Stat,
    pub mu1: Stat,
    pub mu2: Stat,
    pub distance: Stat,
    pub ece: Stat,
    /// Median PE of the correct and incorrect predictions pooled over runs.
    pub median_pe_correct: Option<f64>,
    pub median_pe_incorrect: Option<f64>,
    pub pooled_correct: usize,
    pub pooled_incorrect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub run: usize,
    pub method: String,
    pub error: String,
}

/// Everything in `summary.json`. Paths and thread counts are left out so the
/// file depends only on the config and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    pub n_runs: usize,
    pub master_seed: u64,
    pub test_t: usize,
    pub ece_bins: usize,
    pub failed_runs: Vec<usize>,
    pub failures: Vec<Failure>,
    pub methods: Vec<MethodSummary>,
}

pub fn summarize_experiment(cfg: &ExperimentConfig, result: &ExperimentResult) -> Summary {
    let methods = result
        .methods
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let runs: Vec<&MethodRun> = result.method_runs(i).collect();
            let mut ok_pe = Vec::new();
            let mut bad_pe = Vec::new();
            for s in runs.iter().flat_map(|r| &r.samples) {
                if s.correct {
                    ok_pe.push(s.pe);
                } else {
                    bad_pe.push(s.pe);
                }
            }
            MethodSummary {
                method: spec.name.clone(),
                label: spec.label(),
                runs_ok: runs.len(),
                accuracy: Stat::of(runs.iter().map(|r| Some(r.accuracy))),
                mu1: Stat::of(runs.iter().map(|r| r.group.mu_correct)),
                mu2: Stat::of(runs.iter().map(|r| r.group.mu_incorrect)),
                distance: Stat::of(runs.iter().map(|r| r.group.distance)),
                ece: Stat::of(runs.iter().map(|r| Some(r.ece.ece))),
                median_pe_correct: median(&mut ok_pe),
                median_pe_incorrect: median(&mut bad_pe),
                pooled_correct: ok_pe.len(),
                pooled_incorrect: bad_pe.len(),
            }
        })
        .collect();
    let failures = result
        .runs
        .iter()
        .flat_map(|r| {
            r.outcomes
                .iter()
                .zip(&result.methods)
                .filter_map(move |(o, m)| {
                    o.as_ref().err().map(|e| Failure {
                        run: r.run,
                        method: m.name.clone(),
                        error: e.clone(),
                    })
                })
        })
        .collect();
    Summary {
        dataset: result.dataset.clone(),
        test_fraction: cfg.test_fraction,
        n_runs: result.runs.len(),
        master_seed: cfg.master_seed,
        test_t: cfg.test_t,
        ece_bins: cfg.ece_bins,
        failed_runs: result.failed_runs(),
        failures,
        methods,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_examples() {
        let s = Stat::of([Some(1.0), None, Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.std, Some(2f64.sqrt()));
        assert_eq!(s.n, 2);
        let s = Stat::of([Some(5.0)]);
        assert_eq!((s.mean, s.std), (Some(5.0), None));
        assert_eq!(Stat::of([None]).mean, None);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn run_seeds_are_distinct_and_stable() {
        let a = run_seeds(42, 0);
        assert_eq!(a, run_seeds(42, 0));
        assert_ne!(a, run_seeds(42, 1));
        assert_ne!(a, run_seeds(43, 0));
        let mut all = a.to_vec();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn failure_threshold() {
        let ok = RunResult {
            run: 0,
            outcomes: vec![Err("x".into())],
        };
        let mut result = ExperimentResult {
            dataset: DatasetSpec::default(),
            methods: vec![MethodSpec::builtin("ce").unwrap()],
            runs: vec![ok.clone()],
        };
        for run in 1..10 {
            let mut r = ok.clone();
            r.run = run;
            r.outcomes = vec![Ok(MethodRun {
                method: "ce".into(),
                accuracy: 100.0,
                group: group_stats(&[0.1], &[true]).unwrap(),
                ece: ece_report(&[1.0], &[true], 10).unwrap(),
                samples: vec![],
            })];
            result.runs.push(r);
        }
        assert_eq!(result.failed_runs(), [0]);
        assert!(check_failures(&result, 0.1).is_ok());
        assert!(matches!(
            check_failures(&result, 0.05),
            Err(BenchError::TooManyFailures {
                failed: 1,
                total: 10,
                ..
            })
        ));
    }
}
