//! Fully connected noise predictor `eps_theta(x, t)` trained with Adam on the
//! noise-prediction loss `E || eps_theta(x_t, t) - xi ||^2` (reported per
//! dimension).
//!
//! The network input is `(x_1, .., x_d, t)`; hidden layers use the tanh form
//! of GELU; the output layer is linear.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;
use crate::samplers::SIGMA_FLOOR;
use crate::schedules::NoiseSchedule;
use crate::score_fields::{FieldKind, GaussianData, ScoreField};
use crate::seeds::derive_seed;

pub const CHECKPOINT_FORMAT: &str = "splitflow-mlp/1";

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "gelu_tanh")]
    GeluTanh,
}

impl Activation {
    pub fn id(self) -> &'static str {
        match self {
            Activation::GeluTanh => "gelu_tanh",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let th = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
        }
    }
}

/// Weights are stored `out x in` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

/// Per-layer gradients, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!(
            "layer sizes must list >= 2 positive widths, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Weights `N(0, 2 / fan_in)`, biases `N(0, 1)`.
    pub fn init<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let std = (2.0 / w.ncols() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            // row-major fill keeps the draw order independent of storage layout
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = normal.sample(rng);
                }
            }
            for v in b.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
        Ok(net)
    }

    /// `(dim + 1) -> hidden.. -> dim`.
    pub fn architecture(dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        sizes
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flattened parameters: per layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                out.extend(w.row(i).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = *it.next().unwrap();
                }
            }
            for v in b.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// `eps_theta(x, t)` for a single state.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        if x.len() + 1 != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim() - 1,
                got: x.len(),
            });
        }
        let mut input = DMatrix::zeros(self.input_dim(), 1);
        input.view_mut((0, 0), (x.len(), 1)).copy_from_slice(x);
        input[(x.len(), 0)] = t;
        Ok(self.forward_batch(&input).column(0).into_owned())
    }

    /// Forward pass on inputs stored one per column (`in x m`).
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.weights.len() - 1;
        let mut a = inputs.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        a
    }

    /// Per-dimension mean squared error against `targets` and its gradient.
    pub fn loss_and_gradient(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, Gradients) {
        let n_layers = self.weights.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(inputs.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &acts[l];
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l + 1 < n_layers {
                let a = z.map(|v| self.activation.apply(v));
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        let out = acts.last().expect("output layer");
        let diff = out - targets;
        let scale = 1.0 / diff.len() as f64;
        let loss = diff.norm_squared() * scale;

        let mut delta = diff * (2.0 * scale);
        let mut gw = vec![DMatrix::zeros(0, 0); n_layers];
        let mut gb = vec![DVector::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                back.zip_apply(&pre[l - 1], |g, z| *g *= self.activation.derivative(z));
                delta = back;
            }
        }
        (loss, Gradients { weights: gw, biases: gb })
    }

    pub fn loss(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
        let diff = self.forward_batch(inputs) - targets;
        diff.norm_squared() / diff.len() as f64
    }

    pub fn to_checkpoint(&self, train_config: Option<TrainConfig>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights: self
                .weights
                .iter()
                .map(|w| (0..w.nrows()).flat_map(|i| w.row(i).iter().copied().collect::<Vec<_>>()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
            train_config,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT:?})",
                ck.format
            )));
        }
        let mut net = Self::zeros(&ck.layer_sizes, ck.activation)?;
        if ck.weights.len() != net.weights.len() || ck.biases.len() != net.biases.len() {
            return Err(Error::Config("checkpoint layer count does not match layer_sizes".into()));
        }
        for (l, (w, b)) in net.weights.iter_mut().zip(net.biases.iter_mut()).enumerate() {
            if ck.weights[l].len() != w.len() || ck.biases[l].len() != b.len() {
                return Err(Error::Config(format!("checkpoint layer {l} has the wrong parameter count")));
            }
            *w = DMatrix::from_row_slice(w.nrows(), w.ncols(), &ck.weights[l]);
            *b = DVector::from_column_slice(&ck.biases[l]);
        }
        if !net.is_finite() {
            return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
        }
        Ok(net)
    }
}

/// Serialized network (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: "checkpoint",
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction over an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, cfg: AdamConfig) -> Self {
        let zeros = Gradients {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        };
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, net: &mut Mlp, grad: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let apply = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + epsilon);
            }
        };
        for l in 0..net.weights.len() {
            apply(
                net.weights[l].as_mut_slice(),
                grad.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            apply(
                net.biases[l].as_mut_slice(),
                grad.biases[l].as_slice(),
                self.m.biases[l].as_mut_slice(),
                self.v.biases[l].as_mut_slice(),
            );
        }
    }
}

fn default_n_train() -> usize {
    50_000
}
fn default_n_iters() -> usize {
    15_000
}
fn default_lr_start() -> f64 {
    1e-5
}
fn default_lr_end() -> f64 {
    1e-6
}
fn default_batch_size() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_iters")]
    pub n_iters: usize,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train: default_n_train(),
            n_iters: default_n_iters(),
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_train and batch_size must be > 0".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        Ok(())
    }

    /// `lr(k) = lr_start (lr_end / lr_start)^(k / n_iters)`.
    pub fn learning_rate(&self, k: usize) -> f64 {
        if self.n_iters == 0 {
            return self.lr_start;
        }
        self.lr_start * (self.lr_end / self.lr_start).powf(k as f64 / self.n_iters as f64)
    }
}

/// Training triples packed as network inputs `(x_t, t)` and targets `xi`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl TrainingSet {
    /// `x_0 ~ q(., 0)`, `t ~ U[0, 1]`, `xi ~ N(0, I)`, `x_t = alpha x_0 + sigma xi`.
    pub fn generate<S: NoiseSchedule + ?Sized>(data: &GaussianData, sched: &S, n: usize, seed: u64) -> Self {
        let d = data.dim();
        let density = data.density();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = DMatrix::zeros(d + 1, n);
        let mut targets = DMatrix::zeros(d, n);
        for j in 0..n {
            let x0 = density.sample(&mut rng);
            let t: f64 = rng.gen();
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            for i in 0..d {
                let xi: f64 = StandardNormal.sample(&mut rng);
                targets[(i, j)] = xi;
                inputs[(i, j)] = a * x0[i] + s * xi;
            }
            inputs[(d, j)] = t;
        }
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(self.inputs.nrows(), idx.len(), |i, j| self.inputs[(i, idx[j])]);
        let y = DMatrix::from_fn(self.targets.nrows(), idx.len(), |i, j| self.targets[(i, idx[j])]);
        (x, y)
    }

    /// Full-set loss, evaluated in fixed chunks.
    pub fn loss(&self, net: &Mlp) -> f64 {
        const CHUNK: usize = 4096;
        let n = self.len();
        let mut total = 0.0;
        let mut lo = 0;
        while lo < n {
            let hi = (lo + CHUNK).min(n);
            let x = self.inputs.columns(lo, hi - lo).into_owned();
            let y = self.targets.columns(lo, hi - lo).into_owned();
            total += (net.forward_batch(&x) - y).norm_squared();
            lo = hi;
        }
        total / (n * self.targets.nrows()) as f64
    }
}

/// Training outcome. Losses are per-dimension mean squared errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub curve: Vec<f64>,
    pub initial_loss: f64,
    /// Loss over the whole training set after the last iteration.
    pub final_loss: f64,
    /// Loss on a fresh, equally sized sample of triples.
    pub fresh_loss: f64,
    pub optimal_loss: f64,
    pub activation: String,
    pub adam: AdamConfig,
    pub train_config: TrainConfig,
}

/// Trains `(d+1) -> hidden.. -> d` on the noise-prediction loss.
pub fn train_noise_predictor<S: NoiseSchedule + ?Sized>(
    cfg: &TrainConfig,
    hidden: &[usize],
    data: &GaussianData,
    sched: &S,
) -> Result<(Mlp, LossReport)> {
    cfg.validate()?;
    let d = data.dim();
    let train = TrainingSet::generate(data, sched, cfg.n_train, derive_seed(cfg.seed, "train-data", 0));
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0));
    let mut net = Mlp::init(&Mlp::architecture(d, hidden), Activation::GeluTanh, &mut init_rng)?;
    let adam_cfg = AdamConfig::default();
    let mut adam = Adam::new(&net, adam_cfg);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", 0));

    let initial_loss = train.loss(&net);
    let mut curve = Vec::with_capacity(cfg.n_iters);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(train.len());
    let mut idx = Vec::with_capacity(batch);
    for k in 0..cfg.n_iters {
        idx.clear();
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let take = (batch - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, y) = train.gather(&idx);
        let (loss, grad) = net.loss_and_gradient(&x, &y);
        if !loss.is_finite() || loss > 10.0 * initial_loss {
            return Err(Error::Divergence {
                iteration: k,
                loss,
                initial: initial_loss,
            });
        }
        curve.push(loss);
        adam.update(&mut net, &grad, cfg.learning_rate(k));
    }

    let final_loss = if cfg.n_iters == 0 { initial_loss } else { train.loss(&net) };
    let fresh = TrainingSet::generate(data, sched, cfg.n_train, derive_seed(cfg.seed, "fresh-data", 0));
    let report = LossReport {
        curve,
        initial_loss,
        final_loss,
        fresh_loss: fresh.loss(&net),
        optimal_loss: optimal_loss_oracle(data, sched),
        activation: net.activation().id().to_string(),
        adam: adam_cfg,
        train_config: *cfg,
    };
    Ok((net, report))
}

/// Per-dimension conditional variance of the noise, `(1/d) tr Var(xi | x_t)`,
/// with `Var(xi | x_t) = I - sigma^2 (alpha^2 Sigma + sigma^2 I)^{-1}`.
pub fn conditional_noise_variance<S: NoiseSchedule + ?Sized>(data: &GaussianData, sched: &S, t: f64) -> f64 {
    let d = data.dim();
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let s2 = s * s;
    let mut cov = data.sigma() * (a * a);
    for i in 0..d {
        cov[(i, i)] += s2;
    }
    let inv = cov.cholesky().expect("marginal covariance is SPD").inverse();
    1.0 - s2 * inv.trace() / d as f64
}

/// Bayes-optimal loss `L* = E_t[(1/d) tr Var(xi | x_t, t)]`, `t ~ U[0, 1]`.
pub fn optimal_loss_oracle<S: NoiseSchedule + ?Sized>(data: &GaussianData, sched: &S) -> f64 {
    adaptive_simpson(|t| conditional_noise_variance(data, sched, t), 0.0, 1.0, 1e-6)
}

/// Learned score `s(x, t) = -eps_theta(x, t) / sigma(t)`.
#[derive(Debug, Clone)]
pub struct MlpScore<S> {
    net: Mlp,
    sched: S,
}

impl<S: NoiseSchedule> MlpScore<S> {
    pub fn new(net: Mlp, sched: S) -> Result<Self> {
        if net.input_dim() != net.output_dim() + 1 {
            return Err(Error::Shape {
                expected: net.output_dim() + 1,
                got: net.input_dim(),
            });
        }
        Ok(Self { net, sched })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn inputs(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let d = xs.nrows();
        let mut inputs = DMatrix::from_element(d + 1, xs.ncols(), t);
        inputs.view_mut((0, 0), (d, xs.ncols())).copy_from(xs);
        inputs
    }
}

impl<S: NoiseSchedule> ScoreField for MlpScore<S> {
    fn kind(&self) -> FieldKind {
        FieldKind::LearnedMlp
    }

    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        self.noise_batch(xs, t) * (-1.0 / self.sched.sigma(t).max(SIGMA_FLOOR))
    }

    fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        self.net.forward_batch(&self.inputs(xs, t))
    }

    fn native_noise(&self) -> bool {
        true
    }
}
