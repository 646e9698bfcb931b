//! Training loops, MC-Dropout inference, and the deep-ensemble baseline.
//!
//! Each training epoch runs `mc_train_passes` stochastic forward passes over
//! the full training batch, averages their softmax outputs, evaluates the
//! configured loss on that average, and takes one SGD step. The gradient of
//! the averaged batch flows back through every pass with weight `1/M` under
//! that pass's own dropout mask.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{ensure, Error, Result};
use crate::losses::{total_loss_breakdown, LossKind, LossSpec};
use crate::metrics::entropy;
use crate::network::{
    BackwardScratch, ForwardMode, ForwardPass, Gradients, Network, NetworkDocument,
};
use crate::numerics::{argmax, Matrix, ProbVector};
use crate::scalar::Scalar;

/// Mixes a master seed with a unit index into an independent stream seed
/// (SplitMix64 finalizer over both words).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    /// Stochastic passes averaged per epoch.
    pub mc_train_passes: usize,
    pub lr: f64,
    pub dropout_rate: f64,
    /// Input, hidden, and output widths.
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    /// Evaluate the loss on every pass and average, instead of evaluating it
    /// once on the averaged prediction.
    pub per_pass_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            epochs: 500,
            mc_train_passes: 5,
            lr: 0.05,
            dropout_rate: 0.2,
            layer_sizes: vec![2, 64, 16, 2],
            seed: 0,
            per_pass_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn with_loss(kind: LossKind) -> Self {
        Self {
            loss: LossSpec::new(kind),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        ensure!(self.epochs >= 1, "epochs must be >= 1");
        ensure!(self.mc_train_passes >= 1, "mc_train_passes must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must lie in [0, 1)"
        );
        Ok(())
    }
}

/// Per-epoch loss values, measured on the batch used for that epoch's update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub ce: Vec<f64>,
}

pub fn train<T: Scalar>(config: &TrainConfig, train_set: &Dataset) -> Result<Network<T>> {
    Ok(train_with_history(config, train_set)?.0)
}

pub fn train_with_history<T: Scalar>(
    config: &TrainConfig,
    train_set: &Dataset,
) -> Result<(Network<T>, TrainHistory)> {
    config.validate()?;
    ensure!(!train_set.is_empty(), "empty training set");
    ensure!(
        config.layer_sizes.first() == Some(&2),
        "first layer must take 2-D points"
    );
    ensure!(
        config.layer_sizes.last() == Some(&train_set.n_classes),
        "output width {:?} does not match {} classes",
        config.layer_sizes.last(),
        train_set.n_classes
    );
    let mut net = Network::<T>::init(
        &config.layer_sizes,
        config.dropout_rate,
        derive_seed(config.seed, 0),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let x = train_set.features::<T>();
    let labels = &train_set.labels;
    let passes = config.mc_train_passes;
    let inv_m = T::one() / T::from_count(passes);
    let lr = T::lit(config.lr);
    let mut history = TrainHistory::default();
    let mut runs: Vec<ForwardPass<T>> = (0..passes).map(|_| ForwardPass::empty()).collect();
    let mut grads = Gradients::zeros_like(&net);
    let mut scratch = BackwardScratch::default();

    for epoch in 0..config.epochs {
        for run in &mut runs {
            net.forward_into(&x, ForwardMode::Stochastic, &mut rng, run)?;
        }
        if runs.iter().any(|r| !r.probs.is_finite()) {
            return Err(Error::Training {
                epoch,
                loss: f64::NAN,
            });
        }
        grads.set_zero();
        let mut backprop = |run: &ForwardPass<T>, mut d: Matrix<T>| {
            d.as_mut_slice().iter_mut().for_each(|g| *g *= inv_m);
            net.backward_acc(
                run.mask.as_ref(),
                &run.cache,
                &run.probs,
                &d,
                &mut grads,
                &mut scratch,
            )
        };
        let (loss, ce) = if config.per_pass_loss {
            let (mut loss, mut ce) = (0.0, 0.0);
            for run in &runs {
                let b = total_loss_breakdown(&config.loss, &run.probs, labels)?;
                loss += b.total.value.as_f64() / passes as f64;
                ce += b.ce.as_f64() / passes as f64;
                backprop(run, b.total.grad)?;
            }
            (loss, ce)
        } else {
            let mean = mean_probs(runs.iter().map(|r| &r.probs));
            let b = total_loss_breakdown(&config.loss, &mean, labels)?;
            for run in &runs {
                backprop(run, b.total.grad.clone())?;
            }
            (b.total.value.as_f64(), b.ce.as_f64())
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training { epoch, loss });
        }
        history.loss.push(loss);
        history.ce.push(ce);
        net.apply_sgd(&grads, lr)?;
    }
    Ok((net, history))
}

fn mean_probs<'a, T: Scalar>(mut batches: impl Iterator<Item = &'a Matrix<T>>) -> Matrix<T> {
    let first = batches.next().expect("at least one pass");
    let mut sum = first.clone();
    let mut count = 1usize;
    for b in batches {
        for (s, &v) in sum.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *s += v;
        }
        count += 1;
    }
    let inv = T::one() / T::from_count(count);
    sum.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    sum
}

/// Per-pass outputs for one input and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution<T> {
    /// `passes × classes`
    pub per_pass: Matrix<T>,
    pub mean: ProbVector<T>,
    pub predicted_class: usize,
    /// Entropy of `mean` in nats.
    pub pe: T,
    /// `pe / ln(classes)`, in [0, 1].
    pub pe_normalized: T,
}

impl<T: Scalar> PredictiveDistribution<T> {
    /// Summarizes pass outputs: the mean is their arithmetic mean, the class
    /// its argmax, and the entropy is taken of the mean.
    pub fn from_passes(per_pass: Matrix<T>) -> Result<Self> {
        ensure!(per_pass.rows() >= 1, "need at least one pass");
        let classes = per_pass.cols();
        let mut mean = vec![T::zero(); classes];
        for row in per_pass.row_iter() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let t = T::from_count(per_pass.rows());
        mean.iter_mut().for_each(|m| *m /= t);
        let mean = ProbVector::new(mean)?;
        let pe = entropy(mean.as_slice());
        Ok(Self {
            predicted_class: argmax(mean.as_slice()).0,
            pe_normalized: (pe / T::from_count(classes).ln()).min(T::one()),
            pe,
            mean,
            per_pass,
        })
    }

    /// Max mean probability.
    pub fn confidence(&self) -> T {
        self.mean.as_slice()[self.predicted_class]
    }
}

/// MC-Dropout prediction for a single point from `passes` stochastic passes.
pub fn mc_predict<T: Scalar>(
    net: &Network<T>,
    x: &[T],
    passes: usize,
    seed: u64,
) -> Result<PredictiveDistribution<T>> {
    let batch = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(mc_predict_batch(net, &batch, passes, &mut rng)?
        .pop()
        .expect("one row"))
}

/// MC-Dropout predictions for every row of `x`; each pass draws an
/// independent mask per row.
pub fn mc_predict_batch<T: Scalar, R: RngCore + ?Sized>(
    net: &Network<T>,
    x: &Matrix<T>,
    passes: usize,
    rng: &mut R,
) -> Result<Vec<PredictiveDistribution<T>>> {
    ensure!(passes >= 1, "need at least one forward pass");
    let outs = (0..passes)
        .map(|_| Ok(net.forward(x, ForwardMode::Stochastic, rng)?.probs))
        .collect::<Result<Vec<_>>>()?;
    gather(&outs, x.rows(), net.n_classes())
}

/// Regroups `passes` batch outputs into one distribution per row.
fn gather<T: Scalar>(
    outs: &[Matrix<T>],
    rows: usize,
    classes: usize,
) -> Result<Vec<PredictiveDistribution<T>>> {
    (0..rows)
        .map(|i| {
            let mut data = Vec::with_capacity(outs.len() * classes);
            for o in outs {
                data.extend_from_slice(o.row(i));
            }
            PredictiveDistribution::from_passes(Matrix::from_vec(outs.len(), classes, data)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub n_members: usize,
    /// Inclusive ranges for the first and second hidden widths.
    pub width_ranges: [(usize, usize); 2],
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_members: 30,
            width_ranges: [(64, 128), (16, 32)],
            epochs: 500,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_members >= 1, "ensemble needs at least one member");
        ensure!(self.epochs >= 1, "epochs must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0");
        for &(lo, hi) in &self.width_ranges {
            ensure!(lo >= 1 && lo <= hi, "invalid width range ({lo}, {hi})");
        }
        Ok(())
    }
}

/// Independently initialized deterministic networks whose outputs are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub members: Vec<Network<T>>,
    pub member_archs: Vec<Vec<usize>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(members: Vec<Network<T>>) -> Result<Self> {
        ensure!(!members.is_empty(), "ensemble needs at least one member");
        let (d, c) = (members[0].input_dim(), members[0].n_classes());
        ensure!(
            members
                .iter()
                .all(|m| m.input_dim() == d && m.n_classes() == c),
            "ensemble members must share input and output dimensions"
        );
        let member_archs = members.iter().map(Network::layer_sizes).collect();
        Ok(Self {
            members,
            member_archs,
        })
    }

    /// JSON array of member network documents.
    pub fn to_json(&self) -> Result<String> {
        let docs: Vec<NetworkDocument<T>> = self.members.iter().map(Network::to_document).collect();
        Ok(serde_json::to_string(&docs)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let docs: Vec<NetworkDocument<T>> = serde_json::from_str(s)?;
        Self::new(
            docs.into_iter()
                .map(Network::from_document)
                .collect::<Result<_>>()?,
        )
    }
}

/// Trains `n_members` plain-CE networks without dropout. Member `i` draws its
/// two hidden widths and its init seed from the stream `derive_seed(seed, i)`.
pub fn build_and_train_ensemble<T: Scalar>(
    config: &EnsembleConfig,
    train_set: &Dataset,
) -> Result<Ensemble<T>> {
    config.validate()?;
    let members = (0..config.n_members)
        .map(|i| {
            let cfg = member_config(config, i, train_set.n_classes);
            train(&cfg, train_set).map_err(|e| Error::Member {
                member: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

/// Training configuration of ensemble member `index`.
pub fn member_config(config: &EnsembleConfig, index: usize, n_classes: usize) -> TrainConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index as u64));
    let [(lo1, hi1), (lo2, hi2)] = config.width_ranges;
    let w1 = rng.gen_range(lo1..=hi1);
    let w2 = rng.gen_range(lo2..=hi2);
    TrainConfig {
        loss: LossSpec::new(LossKind::Ce),
        epochs: config.epochs,
        mc_train_passes: 1,
        lr: config.lr,
        dropout_rate: 0.0,
        layer_sizes: vec![2, w1, w2, n_classes],
        seed: rng.next_u64(),
        per_pass_loss: false,
    }
}

/// Averages each member's deterministic softmax output for one point.
pub fn ensemble_predict<T: Scalar>(e: &Ensemble<T>, x: &[T]) -> Result<PredictiveDistribution<T>> {
    let batch = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(ensemble_predict_batch(e, &batch)?.pop().expect("one row"))
}

pub fn ensemble_predict_batch<T: Scalar>(
    e: &Ensemble<T>,
    x: &Matrix<T>,
) -> Result<Vec<PredictiveDistribution<T>>> {
    ensure!(!e.members.is_empty(), "empty ensemble");
    let outs = e
        .members
        .iter()
        .map(|m| m.predict(x))
        .collect::<Result<Vec<_>>>()?;
    gather(&outs, x.rows(), e.members[0].n_classes())
}
