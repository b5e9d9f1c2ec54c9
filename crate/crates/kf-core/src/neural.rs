//! Small feed-forward / LSTM-cell surrogates trained by supervised regression
//! (Adam on mean squared error) to stand in for per-pair Riccati solves.
//!
//! Networks are tiny (a few dense layers of ~100 neurons, optionally a
//! one-to-one stateless LSTM cell), so everything runs on plain `nalgebra`
//! types with handwritten backpropagation. Input/output affine scalings are
//! stored inside [`NetworkParams`], making a saved model self-contained.

use crate::models::{ModelSpec, Order};
use crate::rng::{substream, Purpose};
use crate::sdre::DataRecord;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("model file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file format error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    #[serde(rename = "relu")]
    ReLU,
    Softplus,
    Elu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::ReLU => z.max(0.0),
            // ln(1 + e^z), written to avoid overflow for large |z|
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    LstmCell,
}

/// Network shape: `layer_sizes` lists every layer including input and output;
/// transformation `k` maps layer `k` to layer `k+1` with `layer_kinds[k]` and
/// activation `activations[k+1]` (LSTM cells use it as the cell activation and
/// `recurrent_activations[k]` for their gates). The input and output
/// activations are fixed to identity: the head stays linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub layer_kinds: Vec<LayerKind>,
    pub activations: Vec<Activation>,
    pub recurrent_activations: Vec<Activation>,
}

impl Architecture {
    /// All-dense net with one hidden activation: `input -> hidden.. -> output`.
    pub fn feedforward(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
    ) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        let n_tr = layer_sizes.len() - 1;
        let mut activations = vec![hidden_activation; layer_sizes.len()];
        activations[0] = Activation::Identity;
        *activations.last_mut().unwrap() = Activation::Identity;
        Architecture {
            layer_sizes,
            layer_kinds: vec![LayerKind::Dense; n_tr],
            activations,
            recurrent_activations: vec![Activation::Identity; n_tr],
        }
    }

    /// Net whose first hidden transformation is a one-to-one LSTM cell
    /// (cell activation `sigma`, gate activation `rho`), followed by dense
    /// layers with `dense_activation` and a linear head.
    pub fn lstm_first(
        input: usize,
        hidden: &[usize],
        output: usize,
        sigma: Activation,
        rho: Activation,
        dense_activation: Activation,
    ) -> Self {
        assert!(!hidden.is_empty(), "need at least one hidden layer for the LSTM cell");
        let mut arch = Architecture::feedforward(input, hidden, output, dense_activation);
        arch.layer_kinds[0] = LayerKind::LstmCell;
        arch.activations[1] = sigma;
        arch.recurrent_activations[0] = rho;
        arch
    }

    pub fn n_transformations(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total trainable parameter count.
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        for k in 0..self.n_transformations() {
            let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let dense = fan_out * fan_in + fan_out;
            n += match self.layer_kinds[k] {
                LayerKind::Dense => dense,
                LayerKind::LstmCell => 3 * dense,
            };
        }
        n
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let n_layers = self.layer_sizes.len();
        if n_layers < 2 {
            return Err(NeuralError::InvalidArchitecture(
                "need at least input and output layers".into(),
            ));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(NeuralError::InvalidArchitecture("zero-width layer".into()));
        }
        let n_tr = n_layers - 1;
        if self.layer_kinds.len() != n_tr
            || self.activations.len() != n_layers
            || self.recurrent_activations.len() != n_tr
        {
            return Err(NeuralError::InvalidArchitecture(format!(
                "expected {n_tr} kinds / {n_layers} activations / {n_tr} gate activations, got {}/{}/{}",
                self.layer_kinds.len(),
                self.activations.len(),
                self.recurrent_activations.len()
            )));
        }
        if self.activations[0] != Activation::Identity
            || *self.activations.last().unwrap() != Activation::Identity
        {
            return Err(NeuralError::InvalidArchitecture(
                "input and output activations must be identity".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable parameters of one transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Dense {
        w: DMatrix<f64>,
        b: DVector<f64>,
    },
    Lstm {
        w_i: DMatrix<f64>,
        b_i: DVector<f64>,
        w_c: DMatrix<f64>,
        b_c: DVector<f64>,
        w_o: DMatrix<f64>,
        b_o: DVector<f64>,
    },
}

/// Complete inference-ready network: architecture, per-layer parameters, and
/// the affine input/output scalings baked in at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
    pub input_scale: DVector<f64>,
    pub input_shift: DVector<f64>,
    pub output_scale: DVector<f64>,
    pub output_shift: DVector<f64>,
}

/// Affine per-coordinate input normalization `x -> scale*x + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub scale: DVector<f64>,
    pub shift: DVector<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling { scale: DVector::from_element(dim, 1.0), shift: DVector::zeros(dim) }
    }

    /// Map each state coordinate of the spec's sampling box to `[-1, 1]` and
    /// the trailing time-step input from `dt_range` to `[0, 1]`. Degenerate
    /// ranges collapse to a pure shift.
    pub fn from_sampling_box(spec: &ModelSpec, dt_range: (f64, f64)) -> Self {
        let n = spec.state_dim();
        let mut scale = DVector::zeros(n + 1);
        let mut shift = DVector::zeros(n + 1);
        for i in 0..n {
            let (lo, hi) = (spec.domain_lo[i], spec.domain_hi[i]);
            scale[i] = 2.0 / (hi - lo);
            shift[i] = -(hi + lo) / (hi - lo);
        }
        let (lo, hi) = dt_range;
        if hi > lo {
            scale[n] = 1.0 / (hi - lo);
            shift[n] = -lo / (hi - lo);
        } else {
            scale[n] = 1.0;
            shift[n] = -lo;
        }
        InputScaling { scale, shift }
    }
}

/// A regression dataset in raw physical units, plus the input normalization
/// the network should train (and later run) under.
#[derive(Debug, Clone)]
pub struct SupervisedSet {
    /// One sample per row.
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub input_scaling: InputScaling,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    fn validate(&self, arch: &Architecture) -> Result<(), NeuralError> {
        if self.is_empty() {
            return Err(NeuralError::ShapeMismatch("empty dataset".into()));
        }
        if self.inputs.nrows() != self.targets.nrows() {
            return Err(NeuralError::ShapeMismatch(format!(
                "{} input rows vs {} target rows",
                self.inputs.nrows(),
                self.targets.nrows()
            )));
        }
        if self.inputs.ncols() != arch.input_dim() || self.targets.ncols() != arch.output_dim() {
            return Err(NeuralError::ShapeMismatch(format!(
                "dataset is {}->{} but architecture wants {}->{}",
                self.inputs.ncols(),
                self.targets.ncols(),
                arch.input_dim(),
                arch.output_dim()
            )));
        }
        if self.input_scaling.scale.len() != self.inputs.ncols() {
            return Err(NeuralError::ShapeMismatch(
                "input scaling dimension mismatch".into(),
            ));
        }
        Ok(())
    }
}

/// What a surrogate predicts from `(pair state, dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// The feedback pair `(u, u_star)`.
    Control,
    /// The post-interaction controlled coordinates (velocities for
    /// second-order models, the full opinion pair for first-order ones);
    /// positions advance analytically.
    NextVelocity,
}

/// Assemble `(inputs, targets)` matrices from generated records. Inputs are
/// rows `(stacked state, dt)`; targets depend on `kind`.
pub fn training_matrices(
    spec: &ModelSpec,
    records: &[DataRecord],
    kind: SurrogateKind,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = records.len();
    let kappa = spec.state_dim();
    let out_dim = 2 * spec.d;
    let mut inputs = DMatrix::zeros(n, kappa + 1);
    let mut targets = DMatrix::zeros(n, out_dim);
    for (row, rec) in records.iter().enumerate() {
        let s = rec.state.stacked();
        for j in 0..kappa {
            inputs[(row, j)] = s[j];
        }
        inputs[(row, kappa)] = rec.state.dt;
        match kind {
            SurrogateKind::Control => {
                for j in 0..out_dim {
                    targets[(row, j)] = rec.control[j];
                }
            }
            SurrogateKind::NextVelocity => {
                let next = rec.next_state.stacked();
                let off = match spec.order {
                    Order::First => 0,
                    Order::Second => 2 * spec.d,
                };
                for j in 0..out_dim {
                    targets[(row, j)] = next[off + j];
                }
            }
        }
    }
    (inputs, targets)
}

/// Select rows of a supervised problem by index (typically a train/val split).
pub fn select_rows(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    idx: &[usize],
    scaling: &InputScaling,
) -> SupervisedSet {
    let mut in_sel = DMatrix::zeros(idx.len(), inputs.ncols());
    let mut tg_sel = DMatrix::zeros(idx.len(), targets.ncols());
    for (r, &i) in idx.iter().enumerate() {
        in_sel.row_mut(r).copy_from(&inputs.row(i));
        tg_sel.row_mut(r).copy_from(&targets.row(i));
    }
    SupervisedSet { inputs: in_sel, targets: tg_sel, input_scaling: scaling.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after this many consecutive epochs without a validation
    /// improvement; 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 100,
            epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            early_stop_patience: 20,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NeuralError> {
        if !(self.learning_rate > 0.0) {
            return Err(NeuralError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NeuralError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(NeuralError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(NeuralError::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Per-epoch loss curve; entry 0 is the evaluation at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

// ---------------------------------------------------------------------------
// forward / backward

struct DenseCache {
    input: DVector<f64>,
    z: DVector<f64>,
}

struct LstmCache {
    input: DVector<f64>,
    z_i: DVector<f64>,
    z_c: DVector<f64>,
    z_o: DVector<f64>,
    i: DVector<f64>,
    c_tilde: DVector<f64>,
    c: DVector<f64>,
    o: DVector<f64>,
}

enum LayerCache {
    Dense(DenseCache),
    Lstm(LstmCache),
}

/// One-to-one stateless LSTM cell: `i = rho(W_i x + b_i)`,
/// `c~ = sigma(W_c x + b_c)`, `c = i .* c~`, `o = rho(W_o x + b_o)`,
/// `h = o .* sigma(c)`. No hidden state survives across calls.
pub fn lstm_forward(
    w_i: &DMatrix<f64>,
    b_i: &DVector<f64>,
    w_c: &DMatrix<f64>,
    b_c: &DVector<f64>,
    w_o: &DMatrix<f64>,
    b_o: &DVector<f64>,
    sigma: Activation,
    rho: Activation,
    x: &DVector<f64>,
) -> DVector<f64> {
    let i = (w_i * x + b_i).map(|z| rho.apply(z));
    let c_tilde = (w_c * x + b_c).map(|z| sigma.apply(z));
    let c = i.component_mul(&c_tilde);
    let o = (w_o * x + b_o).map(|z| rho.apply(z));
    o.component_mul(&c.map(|z| sigma.apply(z)))
}

fn forward_trace(params: &NetworkParams, x: &DVector<f64>, caches: &mut Vec<LayerCache>) -> DVector<f64> {
    let mut h = params.input_scale.component_mul(x) + &params.input_shift;
    for (k, layer) in params.layers.iter().enumerate() {
        let sigma = params.arch.activations[k + 1];
        let rho = params.arch.recurrent_activations[k];
        match layer {
            LayerParams::Dense { w, b } => {
                let z = w * &h + b;
                let out = z.map(|v| sigma.apply(v));
                caches.push(LayerCache::Dense(DenseCache { input: h, z }));
                h = out;
            }
            LayerParams::Lstm { w_i, b_i, w_c, b_c, w_o, b_o } => {
                let z_i = w_i * &h + b_i;
                let z_c = w_c * &h + b_c;
                let z_o = w_o * &h + b_o;
                let i = z_i.map(|v| rho.apply(v));
                let c_tilde = z_c.map(|v| sigma.apply(v));
                let c = i.component_mul(&c_tilde);
                let o = z_o.map(|v| rho.apply(v));
                let out = o.component_mul(&c.map(|v| sigma.apply(v)));
                caches.push(LayerCache::Lstm(LstmCache {
                    input: h,
                    z_i,
                    z_c,
                    z_o,
                    i,
                    c_tilde,
                    c,
                    o,
                }));
                h = out;
            }
        }
    }
    params.output_scale.component_mul(&h) + &params.output_shift
}

/// Forward pass through the whole network (any mix of dense and LSTM-cell
/// transformations), including the stored input/output scalings.
pub fn fnn_forward(params: &NetworkParams, x: &DVector<f64>) -> DVector<f64> {
    assert_eq!(
        x.len(),
        params.arch.input_dim(),
        "input length does not match architecture"
    );
    let mut caches = Vec::new();
    forward_trace(params, x, &mut caches)
}

/// Row-wise forward pass: row `i` of the result is the network output for row
/// `i` of `x`.
pub fn batch_evaluate(params: &NetworkParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(
        x.ncols(),
        params.arch.input_dim(),
        "input width does not match architecture"
    );
    let mut out = DMatrix::zeros(x.nrows(), params.arch.output_dim());
    let mut caches = Vec::with_capacity(params.layers.len());
    for r in 0..x.nrows() {
        caches.clear();
        let y = forward_trace(params, &x.row(r).transpose(), &mut caches);
        out.row_mut(r).copy_from(&y.transpose());
    }
    out
}

/// Accumulate the gradient of the squared error `|y(x) - t|^2` into `grads`
/// (same layout as the parameters); returns the sample's squared error.
fn backprop_sample(
    params: &NetworkParams,
    x: &DVector<f64>,
    t: &DVector<f64>,
    grads: &mut [LayerParams],
    caches: &mut Vec<LayerCache>,
) -> f64 {
    caches.clear();
    let y = forward_trace(params, x, caches);
    let err = &y - t;
    let sq = err.norm_squared();

    // d|e|^2/dy = 2e, then through the output scaling
    let mut delta = (2.0 * err).component_mul(&params.output_scale);

    for k in (0..params.layers.len()).rev() {
        let sigma = params.arch.activations[k + 1];
        let rho = params.arch.recurrent_activations[k];
        match (&params.layers[k], &mut grads[k], &caches[k]) {
            (LayerParams::Dense { w, .. }, LayerParams::Dense { w: gw, b: gb }, LayerCache::Dense(cache)) => {
                let dz = delta.zip_map(&cache.z, |d, z| d * sigma.deriv(z));
                *gw += &dz * cache.input.transpose();
                *gb += &dz;
                delta = w.transpose() * dz;
            }
            (
                LayerParams::Lstm { w_i, w_c, w_o, .. },
                LayerParams::Lstm { w_i: gwi, b_i: gbi, w_c: gwc, b_c: gbc, w_o: gwo, b_o: gbo },
                LayerCache::Lstm(cache),
            ) => {
                // h = o .* sigma(c)
                let sig_c = cache.c.map(|v| sigma.apply(v));
                let d_o = delta.component_mul(&sig_c);
                let d_c = delta
                    .component_mul(&cache.o)
                    .zip_map(&cache.c, |d, c| d * sigma.deriv(c));
                let d_i = d_c.component_mul(&cache.c_tilde);
                let d_ctilde = d_c.component_mul(&cache.i);

                let dz_o = d_o.zip_map(&cache.z_o, |d, z| d * rho.deriv(z));
                let dz_i = d_i.zip_map(&cache.z_i, |d, z| d * rho.deriv(z));
                let dz_c = d_ctilde.zip_map(&cache.z_c, |d, z| d * sigma.deriv(z));

                *gwi += &dz_i * cache.input.transpose();
                *gbi += &dz_i;
                *gwc += &dz_c * cache.input.transpose();
                *gbc += &dz_c;
                *gwo += &dz_o * cache.input.transpose();
                *gbo += &dz_o;

                delta = w_i.transpose() * dz_i + w_c.transpose() * dz_c + w_o.transpose() * dz_o;
            }
            _ => unreachable!("gradient/cache layout mismatch"),
        }
    }
    sq
}

fn zero_like(layers: &[LayerParams]) -> Vec<LayerParams> {
    layers
        .iter()
        .map(|l| match l {
            LayerParams::Dense { w, b } => LayerParams::Dense {
                w: DMatrix::zeros(w.nrows(), w.ncols()),
                b: DVector::zeros(b.len()),
            },
            LayerParams::Lstm { w_i, b_i, w_c, b_c, w_o, b_o } => LayerParams::Lstm {
                w_i: DMatrix::zeros(w_i.nrows(), w_i.ncols()),
                b_i: DVector::zeros(b_i.len()),
                w_c: DMatrix::zeros(w_c.nrows(), w_c.ncols()),
                b_c: DVector::zeros(b_c.len()),
                w_o: DMatrix::zeros(w_o.nrows(), w_o.ncols()),
                b_o: DVector::zeros(b_o.len()),
            },
        })
        .collect()
}

/// Mean squared error (mean over samples of the squared error norm) and its
/// gradient with respect to every trainable parameter, in the flat layout of
/// [`NetworkParams::flat`]. Rows of `inputs`/`targets` are samples.
pub fn mse_and_grad(
    params: &NetworkParams,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> (f64, DVector<f64>) {
    assert_eq!(inputs.nrows(), targets.nrows(), "sample count mismatch");
    let n = inputs.nrows();
    let mut grads = zero_like(&params.layers);
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut total_sq = 0.0;
    for r in 0..n {
        total_sq += backprop_sample(
            params,
            &inputs.row(r).transpose(),
            &targets.row(r).transpose(),
            &mut grads,
            &mut caches,
        );
    }
    let scale = 1.0 / n as f64;
    let mut flat = flatten_layers(&grads);
    flat *= scale;
    (total_sq * scale, flat)
}

/// Mean squared error only (forward passes, no gradients).
pub fn mse(params: &NetworkParams, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let pred = batch_evaluate(params, inputs);
    (pred - targets).norm_squared() / inputs.nrows() as f64
}

/// Relative root-mean-square error `sqrt(sum |e|^2 / sum |t|^2)`; the tuning
/// and reporting metric.
pub fn relative_rmse(params: &NetworkParams, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let pred = batch_evaluate(params, inputs);
    let denom = targets.norm_squared();
    if denom == 0.0 {
        return (pred - targets).norm();
    }
    ((pred - targets).norm_squared() / denom).sqrt()
}

fn flatten_layers(layers: &[LayerParams]) -> DVector<f64> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            LayerParams::Dense { w, b } => {
                out.extend(w.iter());
                out.extend(b.iter());
            }
            LayerParams::Lstm { w_i, b_i, w_c, b_c, w_o, b_o } => {
                for m in [w_i, w_c, w_o] {
                    out.extend(m.iter());
                }
                for v in [b_i, b_c, b_o] {
                    out.extend(v.iter());
                }
            }
        }
    }
    DVector::from_vec(out)
}

fn unflatten_into(layers: &mut [LayerParams], flat: &DVector<f64>) {
    let mut pos = 0;
    let take_matrix = |m: &mut DMatrix<f64>, pos: &mut usize| {
        for v in m.iter_mut() {
            *v = flat[*pos];
            *pos += 1;
        }
    };
    for l in layers.iter_mut() {
        match l {
            LayerParams::Dense { w, b } => {
                take_matrix(w, &mut pos);
                for v in b.iter_mut() {
                    *v = flat[pos];
                    pos += 1;
                }
            }
            LayerParams::Lstm { w_i, b_i, w_c, b_c, w_o, b_o } => {
                take_matrix(w_i, &mut pos);
                take_matrix(w_c, &mut pos);
                take_matrix(w_o, &mut pos);
                for b in [b_i, b_c, b_o] {
                    for v in b.iter_mut() {
                        *v = flat[pos];
                        pos += 1;
                    }
                }
            }
        }
    }
    assert_eq!(pos, flat.len(), "flat parameter vector has wrong length");
}

impl NetworkParams {
    /// All trainable parameters as one vector (scalings excluded).
    pub fn flat(&self) -> DVector<f64> {
        flatten_layers(&self.layers)
    }

    /// Overwrite all trainable parameters from a flat vector.
    pub fn set_flat(&mut self, flat: &DVector<f64>) {
        unflatten_into(&mut self.layers, flat);
    }
}

fn glorot_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

fn initialize_layers(arch: &Architecture, seed: u64) -> Vec<LayerParams> {
    (0..arch.n_transformations())
        .map(|k| {
            let (n_in, n_out) = (arch.layer_sizes[k], arch.layer_sizes[k + 1]);
            match arch.layer_kinds[k] {
                LayerKind::Dense => {
                    let mut rng = substream(seed, Purpose::NetworkInit, k as u64, 0);
                    LayerParams::Dense {
                        w: glorot_matrix(n_out, n_in, &mut rng),
                        b: DVector::zeros(n_out),
                    }
                }
                LayerKind::LstmCell => {
                    let mk = |slot: u64| {
                        let mut rng = substream(seed, Purpose::NetworkInit, k as u64, slot);
                        glorot_matrix(n_out, n_in, &mut rng)
                    };
                    LayerParams::Lstm {
                        w_i: mk(1),
                        b_i: DVector::zeros(n_out),
                        w_c: mk(2),
                        b_c: DVector::zeros(n_out),
                        w_o: mk(3),
                        b_o: DVector::zeros(n_out),
                    }
                }
            }
        })
        .collect()
}

/// Column mean/std standardization of the training targets; constant columns
/// fall back to unit scale.
fn output_standardization(targets: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = targets.nrows() as f64;
    let dim = targets.ncols();
    let mut mean = DVector::zeros(dim);
    let mut std = DVector::zeros(dim);
    for j in 0..dim {
        let col = targets.column(j);
        let mu = col.sum() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean[j] = mu;
        std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (std, mean)
}

/// Glorot-initialized parameters for `arch`, with the dataset's input scaling
/// and target standardization baked in.
pub fn initialize(arch: &Architecture, train_set: &SupervisedSet, seed: u64) -> NetworkParams {
    let (output_scale, output_shift) = output_standardization(&train_set.targets);
    NetworkParams {
        arch: arch.clone(),
        layers: initialize_layers(arch, seed),
        input_scale: train_set.input_scaling.scale.clone(),
        input_shift: train_set.input_scaling.shift.clone(),
        output_scale,
        output_shift,
    }
}

/// Mini-batch Adam on the mean squared error. Deterministic given
/// `cfg.seed` (seeded init, seeded shuffles). Returns the parameters with the
/// best validation MSE seen, plus the loss history (entry 0 = initialization).
pub fn train(
    arch: &Architecture,
    train_set: &SupervisedSet,
    val_set: &SupervisedSet,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainingHistory), NeuralError> {
    arch.validate()?;
    cfg.validate()?;
    train_set.validate(arch)?;
    val_set.validate(arch)?;

    let mut params = initialize(arch, train_set, cfg.seed);
    let mut theta = params.flat();
    let n_params = theta.len();
    let mut m = DVector::<f64>::zeros(n_params);
    let mut v = DVector::<f64>::zeros(n_params);
    let mut t = 0u64;

    let n_train = train_set.len();
    let mut order: Vec<usize> = (0..n_train).collect();

    let init_stats = EpochStats {
        train_mse: mse(&params, &train_set.inputs, &train_set.targets),
        val_mse: mse(&params, &val_set.inputs, &val_set.targets),
    };
    let mut history = vec![init_stats];
    let mut best = params.clone();
    let mut best_val = init_stats.val_mse;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    let mut batch_in = DMatrix::zeros(cfg.batch_size, train_set.inputs.ncols());
    let mut batch_tg = DMatrix::zeros(cfg.batch_size, train_set.targets.ncols());

    for epoch in 1..=cfg.epochs {
        {
            use rand::seq::SliceRandom;
            let mut rng = substream(cfg.seed, Purpose::Batching, epoch as u64, 0);
            order.shuffle(&mut rng);
        }
        let mut train_sq = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bs = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                batch_in.row_mut(r).copy_from(&train_set.inputs.row(i));
                batch_tg.row_mut(r).copy_from(&train_set.targets.row(i));
            }
            let bin = batch_in.rows(0, bs);
            let btg = batch_tg.rows(0, bs);
            params.set_flat(&theta);
            let (loss, grad) = mse_and_grad(&params, &bin.into_owned(), &btg.into_owned());
            if !loss.is_finite() {
                return Err(NeuralError::NonFiniteLoss { epoch, batch: batch_no });
            }
            train_sq += loss * bs as f64;

            t += 1;
            let b1t = 1.0 - cfg.adam_beta1.powi(t as i32);
            let b2t = 1.0 - cfg.adam_beta2.powi(t as i32);
            for j in 0..n_params {
                m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * grad[j];
                v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * grad[j] * grad[j];
                let m_hat = m[j] / b1t;
                let v_hat = v[j] / b2t;
                theta[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
        params.set_flat(&theta);
        let stats = EpochStats {
            train_mse: train_sq / n_train as f64,
            val_mse: mse(&params, &val_set.inputs, &val_set.targets),
        };
        history.push(stats);

        if stats.val_mse < best_val {
            best_val = stats.val_mse;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    Ok((best, TrainingHistory { epochs: history, best_epoch }))
}

/// Outcome of a hyper-parameter sweep.
#[derive(Debug, Clone)]
pub struct TuneReport {
    pub entries: Vec<TuneEntry>,
    pub best_index: usize,
}

#[derive(Debug, Clone)]
pub struct TuneEntry {
    pub arch: Architecture,
    pub n_params: usize,
    /// Relative RMSE on the validation set; `None` if training failed.
    pub val_rel_rmse: Option<f64>,
    pub error: Option<String>,
}

/// Train every candidate and keep the best validation relative RMSE; ties go
/// to the smaller parameter count, then to candidate order. Individual
/// training failures are recorded, not fatal (unless every candidate fails).
pub fn tune(
    candidates: &[Architecture],
    train_set: &SupervisedSet,
    val_set: &SupervisedSet,
    cfg: &TrainConfig,
) -> Result<(Architecture, NetworkParams, TuneReport), NeuralError> {
    if candidates.is_empty() {
        return Err(NeuralError::InvalidConfig("need at least one candidate".into()));
    }
    let mut entries = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64, usize, NetworkParams)> = None; // (idx, rmse, n_params, params)
    for (idx, arch) in candidates.iter().enumerate() {
        let n_params = arch.n_params();
        match train(arch, train_set, val_set, cfg) {
            Ok((params, _)) => {
                let rmse = relative_rmse(&params, &val_set.inputs, &val_set.targets);
                let better = match &best {
                    None => true,
                    Some((_, b_rmse, b_np, _)) => {
                        rmse < *b_rmse || (rmse == *b_rmse && n_params < *b_np)
                    }
                };
                if better {
                    best = Some((idx, rmse, n_params, params));
                }
                entries.push(TuneEntry {
                    arch: arch.clone(),
                    n_params,
                    val_rel_rmse: Some(rmse),
                    error: None,
                });
            }
            Err(e) => entries.push(TuneEntry {
                arch: arch.clone(),
                n_params,
                val_rel_rmse: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((idx, _, _, params)) => Ok((
            candidates[idx].clone(),
            params,
            TuneReport { entries, best_index: idx },
        )),
        None => Err(NeuralError::InvalidConfig(
            "every candidate failed to train".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// model file

const MODEL_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    params: NetworkParams,
}

/// Save a network as self-describing JSON; floats round-trip bit-exactly.
pub fn save_model(params: &NetworkParams, path: &Path) -> Result<(), NeuralError> {
    let file = ModelFile { version: MODEL_FILE_VERSION, params: params.clone() };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkParams, NeuralError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.version != MODEL_FILE_VERSION {
        return Err(NeuralError::UnsupportedVersion(file.version));
    }
    file.params.arch.validate()?;
    Ok(file.params)
}
