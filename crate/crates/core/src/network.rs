//! Dense feature extractor plus linear classifier head, trained on the
//! evidential loss with optional spectral normalization of the feature layers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::dirichlet::{
    edl_loss, loss_grad_wrt_alpha, loss_grad_wrt_logits, LossConfig, OneHotLabel,
};
use crate::error::{domain, Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::predict::Parameterization;

/// Round cap when a converged spectral-norm estimate is needed. Iteration stops
/// earlier once successive estimates agree to [`POWER_ITERATION_RTOL`].
pub const CONVERGED_POWER_ITERATIONS: usize = 2000;

pub const POWER_ITERATION_RTOL: f64 = 1e-12;

/// Rounds for the per-epoch report; `u` is already warm from the training steps.
const EPOCH_REPORT_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Self::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }
}

/// Fully connected layer `act(W x + b)` with the persistent left singular
/// vector estimate `u` used by power iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub u: Vec<f64>,
    pub activation: Activation,
}

/// Result of one spectral normalization call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// False when `W` was zero and left untouched.
    pub normalized: bool,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias, random unit `u`.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f64> = (0..input * output).map(|_| rng.gen_range(-a..a)).collect();
        Self {
            weights: Matrix::from_vec(output, input, w).expect("layer shape"),
            bias: vec![0.0; output],
            u: random_unit(output, rng),
            activation,
        }
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return domain(format!(
                "bias length {} != {} output units",
                bias.len(),
                weights.rows()
            ));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return domain("layer parameters must be finite");
        }
        let n = weights.rows();
        let mut u = vec![0.0; n];
        if n > 0 {
            u.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 1.0 + 0.1 * i as f64);
            let k = norm(&u);
            u.iter_mut().for_each(|v| *v /= k);
        }
        Ok(Self {
            weights,
            bias,
            u,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Returns `(pre-activation, activation)`.
    fn forward_full(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.weights.matvec(x);
        axpy(1.0, &self.bias, &mut pre);
        let post = pre.iter().map(|&v| self.activation.apply(v)).collect();
        (pre, post)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_full(x).1
    }

    /// Runs power iteration on a copy of `u` and returns `uᵀ W v` without
    /// touching the layer.
    pub fn spectral_norm_estimate(&self, iterations: usize) -> f64 {
        let mut u = self.u.clone();
        power_iterate(&self.weights, &mut u, iterations).0
    }
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let k = norm(&v);
        if k > 1e-12 {
            return v.into_iter().map(|x| x / k).collect();
        }
    }
}

/// Up to `iterations` rounds of `v = Wᵀu/‖·‖, u = Wv/‖·‖`, stopping once
/// `‖Wv‖` settles; returns `(uᵀWv, v)`.
fn power_iterate(w: &Matrix, u: &mut Vec<f64>, iterations: usize) -> (f64, Vec<f64>) {
    let mut v = vec![0.0; w.cols()];
    let mut prev = f64::NAN;
    for _ in 0..iterations.max(1) {
        v = w.matvec_t(u);
        let nv = norm(&v);
        if nv == 0.0 {
            // u is orthogonal to the row space; restart from a fixed direction
            let k = 1.0 / (u.len() as f64).sqrt();
            u.iter_mut().for_each(|x| *x = k);
            v = w.matvec_t(u);
            let nv = norm(&v);
            if nv == 0.0 {
                return (0.0, v);
            }
            v.iter_mut().for_each(|x| *x /= nv);
        } else {
            v.iter_mut().for_each(|x| *x /= nv);
        }
        let wv = w.matvec(&v);
        let nu = norm(&wv);
        if nu == 0.0 {
            return (0.0, v);
        }
        *u = wv.into_iter().map(|x| x / nu).collect();
        if (nu - prev).abs() <= POWER_ITERATION_RTOL * nu {
            break;
        }
        prev = nu;
    }
    (dot(u, &w.matvec(&v)), v)
}

/// Power-iteration spectral normalization: refresh `u`, estimate
/// `σ̂ = uᵀ W v` and divide `W` by it. A zero matrix is left unchanged and
/// reported with `normalized = false`.
pub fn spectral_normalize(layer: &mut DenseLayer, iterations: usize) -> SpectralEstimate {
    if layer.weights.as_slice().iter().all(|v| *v == 0.0) {
        return SpectralEstimate {
            sigma: 0.0,
            normalized: false,
        };
    }
    let (sigma, _) = power_iterate(&layer.weights, &mut layer.u, iterations);
    if !(sigma > 0.0) || !sigma.is_finite() {
        return SpectralEstimate {
            sigma: 0.0,
            normalized: false,
        };
    }
    layer.weights.scale(1.0 / sigma);
    SpectralEstimate {
        sigma,
        normalized: true,
    }
}

/// Layer sizes of a dense evidential network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the feature layers; the last entry is the feature dimension H.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidentialNetwork {
    pub feature_layers: Vec<DenseLayer>,
    pub head: DenseLayer,
    pub spectral_norm_enabled: bool,
    pub parameterization: Parameterization,
}

/// Per-sample activations kept for backpropagation.
struct Trace {
    /// Input of every feature layer followed by the feature vector.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl EvidentialNetwork {
    /// Randomly initialised network with ReLU feature layers. When spectral
    /// normalization is enabled the feature layers start normalized.
    pub fn new(
        arch: &Architecture,
        parameterization: Parameterization,
        spectral_norm_enabled: bool,
        seed: u64,
    ) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden.is_empty() || arch.hidden.contains(&0) {
            return domain("architecture needs a positive input dimension and at least one non-empty feature layer");
        }
        if arch.num_classes < 2 {
            return domain("at least two classes are required");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feature_layers = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.input_dim;
        for &width in &arch.hidden {
            feature_layers.push(DenseLayer::init(fan_in, width, Activation::Relu, &mut rng));
            fan_in = width;
        }
        let head = DenseLayer::init(fan_in, arch.num_classes, Activation::Identity, &mut rng);
        let mut net = Self {
            feature_layers,
            head,
            spectral_norm_enabled,
            parameterization,
        };
        if spectral_norm_enabled {
            net.normalize_to_convergence();
        }
        Ok(net)
    }

    pub fn from_layers(
        feature_layers: Vec<DenseLayer>,
        head: DenseLayer,
        spectral_norm_enabled: bool,
        parameterization: Parameterization,
    ) -> Result<Self> {
        if feature_layers.is_empty() {
            return domain("network needs at least one feature layer");
        }
        for pair in feature_layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return domain("consecutive feature layers have mismatched dimensions");
            }
        }
        let h = feature_layers
            .last()
            .map(DenseLayer::output_dim)
            .unwrap_or(0);
        if head.input_dim() != h {
            return domain(format!(
                "head expects {} inputs but features have {h}",
                head.input_dim()
            ));
        }
        if head.output_dim() < 2 {
            return domain("head must produce at least two logits");
        }
        Ok(Self {
            feature_layers,
            head,
            spectral_norm_enabled,
            parameterization,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.feature_layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self
                .feature_layers
                .iter()
                .map(DenseLayer::output_dim)
                .collect(),
            num_classes: self.num_classes(),
        }
    }

    /// Feature vector `z = f(x)` and logits `g(z)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return domain(format!(
                "input has {} dims, network expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return domain("non-finite input");
        }
        let mut z = x.to_vec();
        for layer in &self.feature_layers {
            z = layer.forward(&z);
        }
        let logits = self.head.forward(&z);
        Ok((z, logits))
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.feature_layers.len() + 1);
        let mut pre = Vec::with_capacity(self.feature_layers.len());
        let mut a = x.to_vec();
        for layer in &self.feature_layers {
            let (p, next) = layer.forward_full(&a);
            inputs.push(a);
            pre.push(p);
            a = next;
        }
        let logits = self.head.forward(&a);
        inputs.push(a);
        Trace {
            inputs,
            pre,
            logits,
        }
    }

    /// Converged spectral normalization of every feature layer.
    pub fn normalize_to_convergence(&mut self) -> Vec<SpectralEstimate> {
        self.feature_layers
            .iter_mut()
            .map(|l| spectral_normalize(l, CONVERGED_POWER_ITERATIONS))
            .collect()
    }

    /// Largest converged spectral-norm estimate over the feature layers.
    pub fn max_feature_spectral_norm(&self) -> f64 {
        self.max_feature_sigma_with(CONVERGED_POWER_ITERATIONS)
    }

    fn max_feature_sigma_with(&self, iterations: usize) -> f64 {
        self.feature_layers
            .iter()
            .map(|l| l.spectral_norm_estimate(iterations))
            .fold(0.0, f64::max)
    }

    /// All weights and biases, feature layers first, each layer as `W` (row-major) then `b`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self
            .feature_layers
            .iter()
            .chain(std::iter::once(&self.head))
        {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = self
            .layers()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum();
        if params.len() != total {
            return domain(format!("expected {total} parameters, got {}", params.len()));
        }
        let mut rest = params;
        for l in self.layers_mut() {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&rest[..nw]);
            let nb = l.bias.len();
            l.bias.copy_from_slice(&rest[nw..nw + nb]);
            rest = &rest[nw + nb..];
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.feature_layers
            .iter()
            .chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
    }

    fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self
                .layers()
                .map(|l| {
                    (
                        Matrix::zeros(l.output_dim(), l.input_dim()),
                        vec![0.0; l.output_dim()],
                    )
                })
                .collect(),
        }
    }

    /// Mean training-mode loss over `indices` and its gradient.
    pub fn loss_and_grad(
        &self,
        data: &LabeledDataset,
        indices: &[usize],
        cfg: &LossConfig,
    ) -> Result<(f64, Gradients)> {
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        let c = self.num_classes();
        for &i in indices {
            let (x, label) = data.sample(i);
            let y = OneHotLabel::new(label, c)?;
            let tr = self.trace(x);
            // Inputs are finite by construction, so a bad logit or α means the weights blew up.
            let alpha = self
                .parameterization
                .alpha(&tr.logits)
                .map_err(|e| Error::Numeric(format!("training diverged: {e}")))?;
            total += edl_loss(&alpha, &y, cfg)?;
            let g_logits = match self.parameterization {
                Parameterization::Exp => loss_grad_wrt_logits(&tr.logits, &y, cfg, 1.0)?,
                p => {
                    let ga = loss_grad_wrt_alpha(&alpha, &y, cfg)?;
                    ga.iter()
                        .zip(&tr.logits)
                        .map(|(g, &z)| g * p.alpha_derivative(z))
                        .collect()
                }
            };
            self.backward(&tr, &g_logits, &mut grads);
        }
        let n = indices.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }

    fn backward(&self, tr: &Trace, g_logits: &[f64], grads: &mut Gradients) {
        let n_feat = self.feature_layers.len();
        let z = &tr.inputs[n_feat];
        {
            let (gw, gb) = &mut grads.layers[n_feat];
            for (r, &g) in g_logits.iter().enumerate() {
                axpy(g, z, gw.row_mut(r));
            }
            axpy(1.0, g_logits, gb);
        }
        let mut delta = self.head.weights.matvec_t(g_logits);
        for l in (0..n_feat).rev() {
            let layer = &self.feature_layers[l];
            for (d, &p) in delta.iter_mut().zip(&tr.pre[l]) {
                *d *= layer.activation.derivative(p);
            }
            let (gw, gb) = &mut grads.layers[l];
            let a_in = &tr.inputs[l];
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, a_in, gw.row_mut(r));
                }
            }
            axpy(1.0, &delta, gb);
            if l > 0 {
                delta = layer.weights.matvec_t(&delta);
            }
        }
    }

    /// Mean training-mode loss over a whole dataset.
    pub fn mean_loss(&self, data: &LabeledDataset, cfg: &LossConfig) -> Result<f64> {
        if data.is_empty() {
            return domain("empty dataset");
        }
        let c = self.num_classes();
        let mut total = 0.0;
        for i in 0..data.len() {
            let (x, label) = data.sample(i);
            let (_, logits) = self.forward(x)?;
            let alpha = self.parameterization.alpha(&logits)?;
            total += edl_loss(&alpha, &OneHotLabel::new(label, c)?, cfg)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Fraction of samples whose largest logit matches the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let mut hits = 0;
        for i in 0..data.len() {
            let (x, label) = data.sample(i);
            let (_, logits) = self.forward(x)?;
            if crate::predict::argmax(&logits) == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len().max(1) as f64)
    }
}

/// Gradients laid out like the network: feature layers then head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradients {
    fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.layers {
            w.scale(k);
            b.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Flattened in the order of [`EvidentialNetwork::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Learning rate at epoch `t` is `learning_rate · lr_decay^t`.
    pub lr_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lambda: 5e-2,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            lr_decay: 0.95,
            seed: 0,
            optimizer: Optimizer::ADAM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return domain("learning_rate must be non-negative");
        }
        LossConfig::new(self.lambda)?;
        if self.batch_size == 0 || self.batch_size > train_len {
            return domain(format!(
                "batch_size {} must be in 1..={train_len} (training-set size)",
                self.batch_size
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return domain("need max_epochs ≥ 1 and 1 ≤ patience ≤ max_epochs");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return domain(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return domain("invalid Adam hyperparameters");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean mini-batch loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Largest warm-started spectral-norm estimate over the feature layers at epoch end.
    pub max_feature_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Snapshot passed to a training observer after every optimizer step.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub batch_loss: f64,
    pub net: &'a EvidentialNetwork,
}

/// Mini-batch training with per-step spectral normalization and early stopping
/// on validation loss. Returns the network from the best validation epoch.
pub fn train(
    net: EvidentialNetwork,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(EvidentialNetwork, TrainHistory)> {
    train_with_observer(net, train, val, cfg, |_| {})
}

pub fn train_with_observer(
    mut net: EvidentialNetwork,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepInfo<'_>),
) -> Result<(EvidentialNetwork, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return domain("training and validation sets must be non-empty");
    }
    for ds in [train, val] {
        if ds.dim() != net.input_dim() {
            return domain(format!(
                "{} has {} features, network expects {}",
                ds.name(),
                ds.dim(),
                net.input_dim()
            ));
        }
        if ds.labels().iter().any(|&l| l >= net.num_classes()) {
            return domain(format!(
                "{} has labels outside [0, {})",
                ds.name(),
                net.num_classes()
            ));
        }
    }
    cfg.validate(train.len())?;
    let loss_cfg = LossConfig::new(cfg.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, net.parameters().len());
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, EvidentialNetwork)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (steps, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = net.loss_and_grad(train, batch, &loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, step {steps}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            // a zero step leaves W unchanged, so there is nothing to renormalize
            if lr > 0.0 {
                let mut params = net.parameters();
                opt.step(&mut params, &grads.flatten(), lr);
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "parameters diverged at epoch {epoch}, step {steps}"
                    )));
                }
                net.set_parameters(&params)?;
                if net.spectral_norm_enabled {
                    for layer in &mut net.feature_layers {
                        spectral_normalize(layer, 1);
                    }
                }
            }
            observe(&StepInfo {
                epoch,
                step: steps,
                batch_loss: loss,
                net: &net,
            });
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = net.mean_loss(val, &loss_cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
            max_feature_sigma: net.max_feature_sigma_with(EPOCH_REPORT_ITERATIONS),
        });
        log::debug!("epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}");
        match &best {
            Some((b, _)) if val_loss >= *b => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_loss, net.clone()));
                history.best_epoch = epoch;
                stale = 0;
            }
        }
    }
    let (_, mut best_net) = best.expect("at least one epoch ran");
    if best_net.spectral_norm_enabled {
        best_net.normalize_to_convergence();
    }
    Ok((best_net, history))
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => axpy(-lr, grads, params),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;

    fn small_net(sn: bool, param: Parameterization, seed: u64) -> EvidentialNetwork {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![4, 4],
            num_classes: 2,
        };
        EvidentialNetwork::new(&arch, param, sn, seed).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut net = small_net(false, Parameterization::Exp, 0);
        let n = net.parameters().len();
        net.set_parameters(&vec![0.0; n]).unwrap();
        let (_, logits) = net.forward(&[0.3, -1.2]).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::from_parts(Matrix::identity(3), vec![0.0; 3], Activation::Identity)
            .unwrap();
        let head = DenseLayer::from_parts(Matrix::zeros(2, 3), vec![0.0; 2], Activation::Identity)
            .unwrap();
        let net = EvidentialNetwork::from_layers(vec![layer], head, false, Parameterization::Exp)
            .unwrap();
        let (z, _) = net.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(z, vec![1.5, -2.0, 0.25]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small_net(true, Parameterization::Exp, 5);
        let a = net.forward(&[0.7, 0.1]).unwrap();
        let b = net.forward(&[0.7, 0.1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_normalize_diagonal() {
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut layer = DenseLayer::from_parts(w, vec![0.0; 2], Activation::Relu).unwrap();
        let est = spectral_normalize(&mut layer, 200);
        assert!(est.normalized);
        assert!((est.sigma - 2.0).abs() < 1e-9);
        let expect = [1.0, 0.0, 0.0, 0.5];
        for (a, b) in layer.weights.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((norm(&layer.u) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_normalize_fixed_point() {
        // rotation by 30° scaled to unit norm
        let (s, c) = 0.5f64.sin_cos();
        let w = Matrix::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        let mut layer = DenseLayer::from_parts(w.clone(), vec![0.0; 2], Activation::Relu).unwrap();
        spectral_normalize(&mut layer, 50);
        for (a, b) in layer.weights.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_normalize_skips_zero_matrix() {
        let mut layer =
            DenseLayer::from_parts(Matrix::zeros(3, 2), vec![0.0; 3], Activation::Relu).unwrap();
        let est = spectral_normalize(&mut layer, 10);
        assert!(!est.normalized);
        assert_eq!(est.sigma, 0.0);
        assert!(layer.weights.as_slice().iter().all(|v| *v == 0.0));
    }

    fn fd_check(param: Parameterization) {
        let data = two_moons(8, 0.2, 1).unwrap();
        let net = small_net(false, param, 2);
        let cfg = LossConfig::new(0.05).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let (_, g) = net.loss_and_grad(&data, &idx, &cfg).unwrap();
        let g = g.flatten();
        let p0 = net.parameters();
        let h = 1e-5;
        for k in 0..p0.len() {
            let mut probe = net.clone();
            let mut p = p0.clone();
            p[k] += h;
            probe.set_parameters(&p).unwrap();
            let up = probe.loss_and_grad(&data, &idx, &cfg).unwrap().0;
            p[k] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let dn = probe.loss_and_grad(&data, &idx, &cfg).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "{param:?} param {k}: analytic {} vs fd {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        fd_check(Parameterization::Exp);
        fd_check(Parameterization::SoftplusPlusOne);
    }

    #[test]
    fn zero_learning_rate_stops_after_two_epochs() {
        let data = two_moons(64, 0.1, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            patience: 1,
            max_epochs: 20,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (_, hist) = train(
            small_net(true, Parameterization::Exp, 0),
            &data,
            &data,
            &cfg,
        )
        .unwrap();
        assert_eq!(hist.epochs.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_moons(64, 0.1, 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            patience: 3,
            ..TrainConfig::default()
        };
        let (a, ha) = train(
            small_net(true, Parameterization::Exp, 1),
            &data,
            &data,
            &cfg,
        )
        .unwrap();
        let (b, hb) = train(
            small_net(true, Parameterization::Exp, 1),
            &data,
            &data,
            &cfg,
        )
        .unwrap();
        assert_eq!(ha, hb);
        let (pa, pb) = (a.parameters(), b.parameters());
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sn_bound_holds_after_every_step() {
        let data = two_moons(128, 0.1, 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            patience: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut worst: f64 = 0.0;
        train_with_observer(
            small_net(true, Parameterization::Exp, 3),
            &data,
            &data,
            &cfg,
            |s| {
                assert!(s.batch_loss.is_finite());
                worst = worst.max(s.net.max_feature_spectral_norm());
            },
        )
        .unwrap();
        assert!(worst <= 1.05, "worst σ {worst}");
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(10).is_err()); // batch 64 > 10
        assert!(TrainConfig {
            patience: 100,
            ..cfg.clone()
        }
        .validate(1000)
        .is_err());
        assert!(TrainConfig {
            lr_decay: 0.0,
            ..cfg.clone()
        }
        .validate(1000)
        .is_err());
        assert!(cfg.validate(1000).is_ok());
    }

    #[test]
    fn train_rejects_empty_or_mismatched_data() {
        let data = two_moons(64, 0.1, 0).unwrap();
        let empty = data.subset(&[]);
        let net = small_net(false, Parameterization::Exp, 0);
        assert!(train(net.clone(), &empty, &data, &TrainConfig::default()).is_err());
        let blobs = crate::data::gaussian_blobs(40, &[vec![0.0; 3], vec![1.0; 3]], 0.1, 0).unwrap();
        assert!(train(
            net,
            &blobs,
            &blobs,
            &TrainConfig {
                batch_size: 8,
                ..TrainConfig::default()
            }
        )
        .is_err());
    }
}
