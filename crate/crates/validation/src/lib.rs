//! End-to-end checks of the published acceptance criteria. Each check
//! returns a [`Verdict`]; the `acceptance` test target runs them all and
//! prints one line per criterion.

use std::path::Path;
use std::time::Instant;

use caldrop_bench::cli::{execute, Cli};
use caldrop_bench::experiment::{run_experiment, summarize_experiment, RunOptions, Summary};
use caldrop_bench::{DatasetSpec, ExperimentConfig, MethodSpec};
use caldrop_core::metrics::{ece_report, predictive_entropy, uncertainty_confusion};
use caldrop_core::numerics::{finite_diff_grad, relative_error};
use caldrop_core::{
    losses::total_loss, DropoutMask, ForwardMode, LossKind, LossSpec, Matrix64, Network64,
    ProbVector64,
};
use clap::Parser;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// ECE straight from the definition: for every bin, a pass over all samples
/// collects the members `(m−1)/M < c ≤ m/M` (bin 1 also takes 0), then
/// `Σ |B_m|/n · |acc − conf|` in exact rationals.
pub fn oracle_ece(conf: &[f64], correct: &[bool], bins: usize) -> BigRational {
    let n = BigInt::from(conf.len());
    let m_total = BigInt::from(bins);
    let mut total = BigRational::zero();
    for m in 1..=bins {
        let lo = BigRational::new(BigInt::from(m - 1), m_total.clone());
        let hi = BigRational::new(BigInt::from(m), m_total.clone());
        let mut size = 0usize;
        let mut hits = 0usize;
        let mut sum = BigRational::zero();
        for (&c, &k) in conf.iter().zip(correct) {
            let c = exact(c);
            let inside = (c > lo || (m == 1 && c.is_zero())) && c <= hi;
            if inside {
                size += 1;
                hits += usize::from(k);
                sum += c;
            }
        }
        if size == 0 {
            continue;
        }
        let size_r = BigRational::from_integer(BigInt::from(size));
        let acc = BigRational::from_integer(BigInt::from(hits)) / &size_r;
        let mean_conf = sum / &size_r;
        total += BigRational::new(BigInt::from(size), n.clone()) * (acc - mean_conf).abs();
    }
    total
}

/// Whether `v` is a double nearest to `target`.
pub fn is_nearest_double(v: f64, target: &BigRational) -> bool {
    let err = (exact(v) - target).abs();
    [v.next_down(), v.next_up()]
        .iter()
        .all(|&w| (exact(w) - target).abs() >= err)
}

fn random_probs(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes)
        .map(|_| rng.gen_range(0.0..1.0f64).powi(3))
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / classes as f64; classes];
    }
    raw.iter().map(|v| v / total).collect()
}

/// ECE against the exact oracle on 1,000 random batches, plus the
/// hand-computed four-sample case.
pub fn ece_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let classes = rng.gen_range(2..=5usize);
        let bins = rng.gen_range(1..=20usize);
        let mut conf = Vec::with_capacity(n);
        let mut correct = Vec::with_capacity(n);
        for _ in 0..n {
            let p = random_probs(&mut rng, classes);
            let (top, mut c) = p
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, v)| if v > b.1 { (i, v) } else { b });
            if rng.gen_range(0..4) == 0 {
                // on or next to a bin edge
                let edge = rng.gen_range(0..=bins) as f64 / bins as f64;
                c = [edge.next_down(), edge, edge.next_up()][rng.gen_range(0..3)]
                    .clamp(1.0 / classes as f64, 1.0);
            }
            conf.push(c);
            correct.push(rng.gen_range(0..classes) == top);
        }
        let got = ece_report(&conf, &correct, bins).expect("valid batch").ece;
        if !is_nearest_double(got, &oracle_ece(&conf, &correct, bins)) {
            mismatches += 1;
        }
    }
    let hand = ece_report(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false], 2)
        .expect("valid batch")
        .ece;
    Verdict::new(
        mismatches == 0 && hand == 0.25,
        format!("{mismatches} of 1000 batches differ from the oracle; hand case = {hand}"),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix64 {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix64::from_vec(rows, cols, data).expect("finite")
}

/// Mean over `masks` of the network's outputs.
fn mc_mean(net: &Network64, x: &Matrix64, masks: &[Option<DropoutMask>]) -> Matrix64 {
    let mut sum = Matrix64::zeros(x.rows(), net.n_classes());
    for m in masks {
        let p = net.forward_masked(x, m.as_ref()).expect("valid mask").probs;
        for (s, v) in sum.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    let inv = 1.0 / masks.len() as f64;
    sum.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    sum
}

/// Smallest |pre-activation| of any hidden unit over all passes.
fn min_preactivation(net: &Network64, x: &Matrix64, masks: &[Option<DropoutMask>]) -> f64 {
    let mut smallest = f64::INFINITY;
    let hidden = net.layers().len() - 1;
    for m in masks {
        let pass = net.forward_masked(x, m.as_ref()).expect("valid mask");
        for (l, layer) in net.layers()[..hidden].iter().enumerate() {
            let a = &pass.cache.inputs[l];
            for r in 0..a.rows() {
                for j in 0..layer.fan_out() {
                    let z: f64 = layer.biases[j]
                        + a.row(r)
                            .iter()
                            .zip(layer.weights.row(j))
                            .map(|(u, w)| u * w)
                            .sum::<f64>();
                    smallest = smallest.min(z.abs());
                }
            }
        }
    }
    smallest
}

/// No ECE kink near the point: clear argmax, confidence off bin edges, and
/// no bin with accuracy equal to confidence.
fn ece_smooth(probs: &Matrix64, labels: &[usize], bins: usize, margin: f64) -> bool {
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for (row, &y) in probs.row_iter().zip(labels) {
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] < margin {
            return false;
        }
        let scaled = sorted[0] * bins as f64;
        if (scaled - scaled.round()).abs() < margin * bins as f64 {
            return false;
        }
        let top = row.iter().position(|&v| v == sorted[0]).expect("present");
        conf.push(sorted[0]);
        correct.push(top == y);
    }
    let report = ece_report(&conf, &correct, bins).expect("valid batch");
    report
        .bins
        .iter()
        .all(|b| b.count == 0 || (b.acc - b.conf).abs() > margin)
}

/// Backpropagated gradients of every loss, taken on the mean of up to four
/// frozen dropout passes, against central differences over all parameters,
/// on at least `configs` random small networks.
pub fn gradient_suite(configs: usize) -> Verdict {
    const MARGIN: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut worst = [0.0f64; 3];
    let mut failures = 0;
    let mut attempts = 0;
    while checked < configs && attempts < 100 * configs {
        attempts += 1;
        let classes = rng.gen_range(2..=4);
        let mut sizes = vec![2];
        for _ in 0..rng.gen_range(1..=2) {
            sizes.push(rng.gen_range(2..=8));
        }
        sizes.push(classes);
        let rate = [0.0, 0.2, 0.5][rng.gen_range(0..3)];
        let base = Network64::init(&sizes, rate, rng.gen()).expect("valid sizes");
        let theta: Vec<f64> = base
            .parameters()
            .iter()
            .map(|w| w + rng.gen_range(-0.3..0.3))
            .collect();
        let net = base.with_parameters(&theta).expect("same shape");
        let batch = rng.gen_range(1..=12);
        let x = random_matrix(&mut rng, batch, 2, 2.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let passes = rng.gen_range(1..=4);
        let masks: Vec<Option<DropoutMask>> = (0..passes)
            .map(|_| {
                net.forward(&x, ForwardMode::Stochastic, &mut rng)
                    .expect("valid input")
                    .mask
            })
            .collect();
        let bins = rng.gen_range(1..=15);
        let mean = mc_mean(&net, &x, &masks);
        if min_preactivation(&net, &x, &masks) < MARGIN || !ece_smooth(&mean, &labels, bins, MARGIN)
        {
            continue;
        }
        for (k, kind) in [LossKind::Ce, LossKind::CePe, LossKind::CeEce]
            .into_iter()
            .enumerate()
        {
            let spec = LossSpec {
                kind,
                ece_bins: bins,
                ..LossSpec::default()
            };
            let d = total_loss(&spec, &mean, &labels).expect("valid batch").grad;
            let mut scaled = d.clone();
            scaled
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v /= passes as f64);
            let mut analytic = vec![0.0; net.param_count()];
            for m in &masks {
                let pass = net.forward_masked(&x, m.as_ref()).expect("valid mask");
                let g = net
                    .backward(m.as_ref(), &pass.cache, &pass.probs, &scaled)
                    .expect("shapes match");
                for (a, v) in analytic.iter_mut().zip(g.to_flat()) {
                    *a += v;
                }
            }
            let numeric = finite_diff_grad(
                |t: &[f64]| {
                    let n = net.with_parameters(t).expect("same shape");
                    total_loss(&spec, &mc_mean(&n, &x, &masks), &labels)
                        .expect("valid batch")
                        .value
                },
                &theta,
                1e-6,
            )
            .expect("finite loss");
            let err = relative_error(&analytic, &numeric);
            worst[k] = worst[k].max(err);
            if err.is_nan() || err >= 1e-4 {
                failures += 1;
            }
        }
        checked += 1;
    }
    Verdict::new(
        checked >= configs && failures == 0,
        format!(
            "{checked} networks ({} skipped near a kink), worst relative error CE {:.1e}, CE+PE {:.1e}, CE+ECE {:.1e}; {failures} above 1e-4",
            attempts - checked,
            worst[0],
            worst[1],
            worst[2]
        ),
    )
}

/// Confusion counts over a full threshold sweep, bounds of normalized PE,
/// and the uniform maximum.
pub fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid: Vec<f64> = (0..=50).map(|i| f64::from(i) / 50.0).collect();
    let mut bad_counts = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=100);
        let correct: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let unc: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        for &t in &grid {
            let cm = uncertainty_confusion(&correct, &unc, t).expect("valid input");
            if cm.tu + cm.tc + cm.fu + cm.fc != n {
                bad_counts += 1;
            }
        }
    }
    let mut out_of_range = 0;
    for _ in 0..10_000 {
        let classes = rng.gen_range(2..=10);
        let p = ProbVector64::new(random_probs(&mut rng, classes)).expect("valid probabilities");
        let h = predictive_entropy(&p, true);
        if !(0.0..=1.0).contains(&h) {
            out_of_range += 1;
        }
    }
    let uniform_gap = (2..=20)
        .map(|c| {
            let u = ProbVector64::uniform(c).expect("two or more classes");
            (predictive_entropy(&u, true) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    Verdict::new(
        bad_counts == 0 && out_of_range == 0 && uniform_gap <= 1e-9,
        format!(
            "{bad_counts} count mismatches, {out_of_range} normalized PE outside [0,1], uniform gap {uniform_gap:.1e}"
        ),
    )
}

/// `run --seed 42 --runs 5` twice, with one and two worker threads.
pub fn determinism(scratch: &Path) -> Verdict {
    let mut outputs = Vec::new();
    for (dir, jobs) in [("a", "1"), ("b", "2")] {
        let out = scratch.join(dir);
        let args = [
            "caldrop",
            "run",
            "--seed",
            "42",
            "--runs",
            "5",
            "--jobs",
            jobs,
            "--quiet",
            "--out",
            out.to_str().expect("utf-8 path"),
        ];
        let cli = match Cli::try_parse_from(args) {
            Ok(c) => c,
            Err(e) => return Verdict::new(false, format!("bad arguments: {e}")),
        };
        if let Err(e) = execute(&cli) {
            return Verdict::new(false, format!("run failed: {e}"));
        }
        outputs.push(out);
    }
    let mut differ = Vec::new();
    for file in ["runs.csv", "summary.json"] {
        let a = std::fs::read(outputs[0].join(file)).unwrap_or_default();
        let b = std::fs::read(outputs[1].join(file)).unwrap_or_default();
        if a.is_empty() || a != b {
            differ.push(file);
        }
    }
    Verdict::new(
        differ.is_empty(),
        if differ.is_empty() {
            "runs.csv and summary.json byte-identical across --jobs 1 and 2".to_string()
        } else {
            format!("differing or missing: {}", differ.join(", "))
        },
    )
}

/// A multi-run experiment on `dataset` with built-in methods.
pub struct Experiment {
    pub summary: Summary,
    pub seconds: f64,
}

impl Experiment {
    pub fn run(dataset: DatasetSpec, master_seed: u64, methods: &[&str], runs: usize) -> Self {
        let cfg = ExperimentConfig {
            dataset,
            master_seed,
            n_runs: runs,
            methods: methods
                .iter()
                .map(|m| MethodSpec::builtin(m).expect("built-in method"))
                .collect(),
            ..ExperimentConfig::default()
        };
        let start = Instant::now();
        let result = run_experiment(
            &cfg,
            &cfg.dataset,
            &cfg.methods,
            &RunOptions {
                jobs: 0,
                quiet: true,
            },
        )
        .expect("thread pool");
        Self {
            summary: summarize_experiment(&cfg, &result),
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn method(&self, name: &str) -> &caldrop_bench::experiment::MethodSummary {
        self.summary
            .methods
            .iter()
            .find(|m| m.method == name)
            .expect("method was run")
    }

    pub fn accuracy(&self, name: &str) -> f64 {
        self.method(name).accuracy.mean.unwrap_or(f64::NAN)
    }

    pub fn distance(&self, name: &str) -> f64 {
        self.method(name).distance.mean.unwrap_or(f64::NAN)
    }

    pub fn ece(&self, name: &str) -> f64 {
        self.method(name).ece.mean.unwrap_or(f64::NAN)
    }

    /// Pooled median PE of (correct, incorrect) predictions.
    pub fn medians(&self, name: &str) -> (f64, f64) {
        let m = self.method(name);
        (
            m.median_pe_correct.unwrap_or(f64::NAN),
            m.median_pe_incorrect.unwrap_or(f64::NAN),
        )
    }

    pub fn failed_runs(&self) -> usize {
        self.summary.failed_runs.len()
    }
}

pub fn two_moons(noise: f64) -> DatasetSpec {
    DatasetSpec::TwoMoons { n: 1000, noise }
}

pub fn blobs(std: f64) -> DatasetSpec {
    DatasetSpec::Blobs {
        n: 1000,
        std,
        centers: caldrop_core::datagen::DEFAULT_CENTERS.to_vec(),
    }
}
