//! Fully connected ReLU classifier with inverted dropout on hidden layers,
//! a hand-derived backward pass, and plain SGD.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{gemm_acc, softmax_in_place, Matrix};
use crate::scalar::Scalar;

/// Whether dropout is active during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// No units dropped. Inverted dropout needs no test-time rescale.
    Deterministic,
    /// A fresh Bernoulli mask is drawn for every hidden layer.
    Stochastic,
}

/// One dense layer: `weights` is `out × in`, the dropout rate applies to this
/// layer's (post-ReLU) output. The output layer always has rate 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Matrix<T>,
    pub biases: Vec<T>,
    pub dropout_rate: f64,
}

impl<T: Scalar> Layer<T> {
    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    n_classes: usize,
}

/// Keep flags for one hidden layer, `batch × width` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub keep: Vec<bool>,
    /// `1 / (1 − rate)`, applied to kept units only.
    pub scale: f64,
}

/// A sampled thinned network: one [`LayerMask`] per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<LayerMask>,
}

impl DropoutMask {
    /// Fraction of dropped units over every hidden layer.
    pub fn drop_fraction(&self) -> f64 {
        let (dropped, total) = self.layers.iter().fold((0usize, 0usize), |(d, t), l| {
            (d + l.keep.iter().filter(|k| !**k).count(), t + l.keep.len())
        });
        dropped as f64 / total.max(1) as f64
    }
}

/// Activations entering each layer: `inputs[0]` is the batch itself,
/// `inputs[l]` the (masked, scaled) output of hidden layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub inputs: Vec<Matrix<T>>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `batch × n_classes` softmax outputs.
    pub probs: Matrix<T>,
    pub mask: Option<DropoutMask>,
    pub cache: ForwardCache<T>,
}

impl<T: Scalar> ForwardPass<T> {
    /// A pass with no buffers yet, for [`Network::forward_into`] to fill.
    pub fn empty() -> Self {
        Self {
            probs: Matrix::zeros(0, 0),
            mask: None,
            cache: ForwardCache { inputs: Vec::new() },
        }
    }
}

/// Reusable buffers for [`Network::backward_acc`].
#[derive(Debug, Clone)]
pub struct BackwardScratch<T> {
    dz: Matrix<T>,
    da: Matrix<T>,
}

impl<T: Scalar> Default for BackwardScratch<T> {
    fn default() -> Self {
        Self {
            dz: Matrix::zeros(0, 0),
            da: Matrix::zeros(0, 0),
        }
    }
}

/// Parameter gradients, shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.fan_out(), l.fan_in()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.fan_out()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Flattened in the same order as [`Network::parameters`].
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_zero(&mut self) {
        for w in &mut self.weights {
            w.as_mut_slice().fill(T::zero());
        }
        for b in &mut self.biases {
            b.fill(T::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T: Scalar> Network<T> {
    /// He-initialized network: weights `N(0, 2 / fan_in)`, zero biases.
    ///
    /// `layer_sizes` lists input, hidden, and output widths; the dropout rate
    /// is applied to every hidden layer.
    pub fn init(layer_sizes: &[usize], dropout_rate: f64, seed: u64) -> Result<Self> {
        ensure!(
            layer_sizes.len() >= 3,
            "need input, at least one hidden, and an output layer; got {layer_sizes:?}"
        );
        ensure!(
            layer_sizes.iter().all(|&s| s >= 1),
            "layer sizes must be >= 1: {layer_sizes:?}"
        );
        ensure!(
            *layer_sizes.last().unwrap() >= 2,
            "classifier needs at least two output classes"
        );
        ensure!(
            (0.0..1.0).contains(&dropout_rate),
            "dropout rate must lie in [0, 1), got {dropout_rate}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = layer_sizes.len() - 1;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                let weights: Vec<T> = (0..fan_in * fan_out)
                    .map(|_| T::lit(normal.sample(&mut rng)))
                    .collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, weights).expect("sized"),
                    biases: vec![T::zero(); fan_out],
                    dropout_rate: if i + 1 < n_layers { dropout_rate } else { 0.0 },
                }
            })
            .collect();
        Ok(Self {
            layers,
            n_classes: *layer_sizes.last().unwrap(),
        })
    }

    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        ensure!(layers.len() >= 2, "need at least one hidden layer");
        for pair in layers.windows(2) {
            ensure!(
                pair[0].fan_out() == pair[1].fan_in(),
                "layer output {} does not feed next input {}",
                pair[0].fan_out(),
                pair[1].fan_in()
            );
        }
        for l in &layers {
            ensure!(l.biases.len() == l.fan_out(), "bias length mismatch");
            ensure!(
                l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()),
                "parameters must be finite"
            );
            ensure!(
                (0.0..1.0).contains(&l.dropout_rate),
                "dropout rate must lie in [0, 1)"
            );
        }
        ensure!(
            layers.last().unwrap().dropout_rate == 0.0,
            "output layer cannot use dropout"
        );
        let n_classes = layers.last().unwrap().fan_out();
        ensure!(
            n_classes >= 2,
            "classifier needs at least two output classes"
        );
        Ok(Self { layers, n_classes })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    /// Dropout rate of the first hidden layer.
    pub fn dropout_rate(&self) -> f64 {
        self.layers[0].dropout_rate
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    /// All parameters flattened layer by layer (weights row-major, then biases).
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Copy of this network with parameters replaced from a flat vector.
    pub fn with_parameters(&self, flat: &[T]) -> Result<Self> {
        ensure!(
            flat.len() == self.param_count(),
            "expected {} parameters, got {}",
            self.param_count(),
            flat.len()
        );
        let mut net = self.clone();
        let mut rest = flat;
        for l in &mut net.layers {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&rest[..nw]);
            rest = &rest[nw..];
            let nb = l.biases.len();
            l.biases.copy_from_slice(&rest[..nb]);
            rest = &rest[nb..];
        }
        Ok(net)
    }

    /// Runs the batch `x` (`batch × input_dim`) through the network.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        x: &Matrix<T>,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let mut pass = ForwardPass::empty();
        self.forward_into(x, mode, rng, &mut pass)?;
        Ok(pass)
    }

    /// [`Network::forward`] writing into `pass`, reusing its buffers.
    pub fn forward_into<R: RngCore + ?Sized>(
        &self,
        x: &Matrix<T>,
        mode: ForwardMode,
        rng: &mut R,
        pass: &mut ForwardPass<T>,
    ) -> Result<()> {
        self.check_input(x)?;
        if mode == ForwardMode::Stochastic && self.has_dropout() {
            let mask = pass
                .mask
                .get_or_insert_with(|| DropoutMask { layers: Vec::new() });
            self.fill_mask(x.rows(), rng, mask);
        } else {
            pass.mask = None;
        }
        self.run_layers(x, pass);
        Ok(())
    }

    /// Forward pass with a caller-supplied mask (or none).
    pub fn forward_masked(
        &self,
        x: &Matrix<T>,
        mask: Option<&DropoutMask>,
    ) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        if let Some(m) = mask {
            self.check_mask(m, x.rows())?;
        }
        let mut pass = ForwardPass::empty();
        pass.mask = mask.cloned();
        self.run_layers(x, &mut pass);
        Ok(pass)
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        ensure!(
            x.cols() == self.input_dim(),
            "input has {} features, network expects {}",
            x.cols(),
            self.input_dim()
        );
        Ok(())
    }

    fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.dropout_rate > 0.0)
    }

    fn check_mask(&self, mask: &DropoutMask, batch: usize) -> Result<()> {
        let hidden = &self.layers[..self.layers.len() - 1];
        ensure!(
            mask.layers.len() == hidden.len(),
            "mask has {} layers, network has {} hidden layers",
            mask.layers.len(),
            hidden.len()
        );
        for (m, l) in mask.layers.iter().zip(hidden) {
            ensure!(
                m.keep.len() == batch * l.fan_out(),
                "mask shape does not match batch {batch} x width {}",
                l.fan_out()
            );
        }
        Ok(())
    }

    /// Draws keep flags for every hidden unit of a `batch`-row pass.
    pub fn sample_mask<R: RngCore + ?Sized>(&self, batch: usize, rng: &mut R) -> DropoutMask {
        let mut mask = DropoutMask { layers: Vec::new() };
        self.fill_mask(batch, rng, &mut mask);
        mask
    }

    fn fill_mask<R: RngCore + ?Sized>(&self, batch: usize, rng: &mut R, mask: &mut DropoutMask) {
        let hidden = &self.layers[..self.layers.len() - 1];
        mask.layers.resize_with(hidden.len(), || LayerMask {
            keep: Vec::new(),
            scale: 1.0,
        });
        for (l, lm) in hidden.iter().zip(&mut mask.layers) {
            let len = batch * l.fan_out();
            lm.keep.clear();
            if l.dropout_rate == 0.0 {
                lm.keep.resize(len, true);
                lm.scale = 1.0;
                continue;
            }
            // Unit dropped iff a uniform u32 falls below rate * 2^32.
            let threshold = (l.dropout_rate * 4_294_967_296.0) as u64;
            lm.keep
                .extend((0..len).map(|_| u64::from(rng.next_u32()) >= threshold));
            lm.scale = 1.0 / (1.0 - l.dropout_rate);
        }
    }

    fn run_layers(&self, x: &Matrix<T>, pass: &mut ForwardPass<T>) {
        let batch = x.rows();
        let last = self.layers.len() - 1;
        let inputs = &mut pass.cache.inputs;
        inputs.resize_with(self.layers.len(), || Matrix::zeros(0, 0));
        inputs[0].clone_from(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let out_dim = layer.fan_out();
            let (done, rest) = inputs.split_at_mut(li + 1);
            let a = &done[li];
            let z = if li == last {
                &mut pass.probs
            } else {
                &mut rest[0]
            };
            z.fill_rows(batch, &layer.biases);
            // z += a · Wᵀ, with Wᵀ materialized so the inner loop is contiguous.
            let wt = layer.weights.transpose();
            gemm_acc(
                batch,
                layer.fan_in(),
                out_dim,
                a.as_slice(),
                layer.fan_in(),
                1,
                wt.as_slice(),
                z.as_mut_slice(),
            );
            if li == last {
                for row in z.as_mut_slice().chunks_exact_mut(out_dim) {
                    softmax_in_place(row);
                }
                continue;
            }
            let zs = z.as_mut_slice();
            match pass.mask.as_ref().map(|m| &m.layers[li]) {
                Some(lm) => {
                    let factor = [T::zero(), T::lit(lm.scale)];
                    for (v, &k) in zs.iter_mut().zip(&lm.keep) {
                        *v = v.max(T::zero()) * factor[usize::from(k)];
                    }
                }
                None => {
                    for v in zs.iter_mut() {
                        *v = v.max(T::zero());
                    }
                }
            }
        }
    }

    /// Gradients of a scalar loss given `d_probs = ∂loss/∂probs` for the pass
    /// that produced `cache` and `probs`. Dropout masks are constants.
    pub fn backward(
        &self,
        mask: Option<&DropoutMask>,
        cache: &ForwardCache<T>,
        probs: &Matrix<T>,
        d_probs: &Matrix<T>,
    ) -> Result<Gradients<T>> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_acc(
            mask,
            cache,
            probs,
            d_probs,
            &mut grads,
            &mut BackwardScratch::default(),
        )?;
        Ok(grads)
    }

    /// [`Network::backward`] adding into `grads` instead of returning fresh ones.
    pub fn backward_acc(
        &self,
        mask: Option<&DropoutMask>,
        cache: &ForwardCache<T>,
        probs: &Matrix<T>,
        d_probs: &Matrix<T>,
        grads: &mut Gradients<T>,
        scratch: &mut BackwardScratch<T>,
    ) -> Result<()> {
        let batch = probs.rows();
        ensure!(
            cache.inputs.len() == self.layers.len(),
            "cache does not match network depth"
        );
        ensure!(
            probs.cols() == self.n_classes
                && d_probs.rows() == batch
                && d_probs.cols() == self.n_classes,
            "upstream gradient shape mismatch"
        );
        for (inp, layer) in cache.inputs.iter().zip(&self.layers) {
            ensure!(
                inp.rows() == batch && inp.cols() == layer.fan_in(),
                "cached activations do not match the network"
            );
        }
        ensure!(
            grads.weights.len() == self.layers.len()
                && grads
                    .weights
                    .iter()
                    .zip(&self.layers)
                    .all(|(g, l)| g.rows() == l.fan_out() && g.cols() == l.fan_in()),
            "gradient buffers do not match the network"
        );
        if let Some(m) = mask {
            self.check_mask(m, batch)?;
        }

        // Softmax Jacobian: dz_j = p_j (g_j − Σ_k g_k p_k).
        let c = self.n_classes;
        let BackwardScratch { dz, da } = scratch;
        dz.reset_zeros(batch, c);
        for i in 0..batch {
            let p = probs.row(i);
            let g = d_probs.row(i);
            let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for (j, out) in dz.row_mut(i).iter_mut().enumerate() {
                *out = p[j] * (g[j] - dot);
            }
        }

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
            let a_prev = &cache.inputs[li];
            // dW += dzᵀ · a_prev
            gemm_acc(
                fan_out,
                batch,
                fan_in,
                dz.as_slice(),
                1,
                fan_out,
                a_prev.as_slice(),
                grads.weights[li].as_mut_slice(),
            );
            let db = &mut grads.biases[li];
            for row in dz.row_iter() {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            if li == 0 {
                break;
            }
            // da_prev = dz · W, then back through dropout and ReLU. A unit with
            // zero activation was either dropped or inactive; both pass nothing.
            da.reset_zeros(batch, fan_in);
            gemm_acc(
                batch,
                fan_out,
                fan_in,
                dz.as_slice(),
                fan_out,
                1,
                layer.weights.as_slice(),
                da.as_mut_slice(),
            );
            let scale = mask.map_or(T::one(), |m| T::lit(m.layers[li - 1].scale));
            let factor = [T::zero(), scale];
            for (d, &a) in da.as_mut_slice().iter_mut().zip(a_prev.as_slice()) {
                *d *= factor[usize::from(a > T::zero())];
            }
            std::mem::swap(dz, da);
        }
        Ok(())
    }

    /// Returns the network after `param -= lr * grad` for every parameter.
    pub fn sgd_step(mut self, grads: &Gradients<T>, lr: T) -> Result<Self> {
        self.apply_sgd(grads, lr)?;
        Ok(self)
    }

    /// In-place form of [`Network::sgd_step`].
    pub fn apply_sgd(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        ensure!(
            lr > T::zero() && lr.is_finite(),
            "learning rate must be positive"
        );
        ensure!(
            grads.weights.len() == self.layers.len()
                && grads
                    .weights
                    .iter()
                    .zip(&self.layers)
                    .all(|(g, l)| g.rows() == l.fan_out() && g.cols() == l.fan_in()),
            "gradient shape does not match network"
        );
        for ((layer, gw), gb) in self
            .layers
            .iter_mut()
            .zip(&grads.weights)
            .zip(&grads.biases)
        {
            for (w, &g) in layer.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= lr * g;
            }
            for (b, &g) in layer.biases.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        Ok(())
    }

    /// Deterministic softmax outputs for a batch.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_masked(x, None)?.probs)
    }

    /// Serializes to the flat JSON document used by the CLI.
    pub fn to_document(&self) -> NetworkDocument<T> {
        NetworkDocument {
            layer_sizes: self.layer_sizes(),
            dropout_rate: self.dropout_rate(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.as_slice().to_vec())
                .collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_document(doc: NetworkDocument<T>) -> Result<Self> {
        let sizes = &doc.layer_sizes;
        ensure!(sizes.len() >= 3, "layer_sizes needs at least three entries");
        ensure!(
            doc.weights.len() == sizes.len() - 1 && doc.biases.len() == sizes.len() - 1,
            "expected {} weight and bias arrays",
            sizes.len() - 1
        );
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .zip(doc.weights)
            .zip(doc.biases)
            .enumerate()
            .map(|(i, ((pair, w), b))| {
                Ok(Layer {
                    weights: Matrix::from_vec(pair[1], pair[0], w)?,
                    biases: b,
                    dropout_rate: if i + 1 < n_layers {
                        doc.dropout_rate
                    } else {
                        0.0
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

/// On-disk network format: weights are per-layer row-major `out × in` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NetworkDocument<T> {
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}
