//! Closed-form Dirichlet quantities and the evidential loss.
//!
//! The loss for one sample with concentration `α` and one-hot label `y` is
//!
//! ```text
//! L = E_{π∼Dir(α)} ‖y − π‖²  +  λ · KL(Dir(α̃) ‖ Dir(1)),   α̃ = α ⊙ (1 − y) + y
//! ```
//!
//! The expected squared error has the closed form
//! `Σ_c (y_c − p_c)² + p_c (1 − p_c) / (α₀ + 1)` with `p = α / α₀`, and the KL
//! term is evaluated with log-gamma and digamma. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::special::{digamma, ln_gamma, trigamma};

/// Smallest concentration value admitted anywhere in the crate.
pub const ALPHA_FLOOR: f64 = 1e-30;
/// Largest concentration value produced by the exponential parameterization.
pub const ALPHA_CEIL: f64 = 1e300;

/// Strictly positive Dirichlet concentration parameters over `C ≥ 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConcentrationVector(Vec<f64>);

impl ConcentrationVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return domain(format!(
                "concentration vector needs at least 2 classes, got {}",
                alpha.len()
            ));
        }
        if let Some((i, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0) || !a.is_finite())
        {
            return domain(format!(
                "concentration component {i} is {a}, must be positive and finite"
            ));
        }
        Ok(Self(alpha))
    }

    /// All-ones concentration (the uniform Dirichlet).
    pub fn ones(num_classes: usize) -> Result<Self> {
        Self::new(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// α₀ = Σ α_c.
    pub fn precision(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn expected_probs(&self) -> Vec<f64> {
        let s = self.precision();
        self.0.iter().map(|a| a / s).collect()
    }
}

impl TryFrom<Vec<f64>> for ConcentrationVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConcentrationVector> for Vec<f64> {
    fn from(a: ConcentrationVector) -> Self {
        a.0
    }
}

/// One-hot class label stored as its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotLabel {
    class: usize,
    num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return domain(format!(
                "label {class} out of range for {num_classes} classes"
            ));
        }
        Ok(Self { class, num_classes })
    }

    /// Parses an explicit 0/1 vector with exactly one 1.
    pub fn from_slice(y: &[f64]) -> Result<Self> {
        let mut hot = None;
        for (i, &v) in y.iter().enumerate() {
            if v == 1.0 {
                if hot.replace(i).is_some() {
                    return domain("one-hot vector has more than one 1");
                }
            } else if v != 0.0 {
                return domain(format!("one-hot component {i} is {v}"));
            }
        }
        match hot {
            Some(class) => Self::new(class, y.len()),
            None => domain("one-hot vector has no 1"),
        }
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes];
        y[self.class] = 1.0;
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return domain(format!(
                "lambda must be a non-negative finite number, got {lambda}"
            ));
        }
        Ok(Self { lambda })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.05 }
    }
}

/// Expected class probabilities `α_c / α₀`.
pub fn expected_probs(alpha: &ConcentrationVector) -> Vec<f64> {
    alpha.expected_probs()
}

pub fn precision(alpha: &ConcentrationVector) -> f64 {
    alpha.precision()
}

/// Subjective-logic belief masses and uncertainty mass for evidence `e`, using
/// the conventional `α = 1 + e`.
pub fn belief_uncertainty(evidence: &[f64]) -> Result<(Vec<f64>, f64)> {
    if evidence.len() < 2 {
        return domain("evidence needs at least 2 classes");
    }
    if let Some(e) = evidence.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return domain(format!("evidence must be non-negative and finite, got {e}"));
    }
    let c = evidence.len() as f64;
    let s = c + evidence.iter().sum::<f64>();
    Ok((evidence.iter().map(|e| e / s).collect(), c / s))
}

/// Replaces the true-class component by 1.
pub fn masked_alpha(alpha: &ConcentrationVector, y: &OneHotLabel) -> Result<ConcentrationVector> {
    check_len(alpha, y)?;
    let mut a = alpha.0.clone();
    a[y.class] = 1.0;
    Ok(ConcentrationVector(a))
}

/// `E_{π∼Dir(α)} ‖y − π‖²` in closed form.
pub fn expected_mse(alpha: &ConcentrationVector, y: &OneHotLabel) -> Result<f64> {
    check_len(alpha, y)?;
    let s = alpha.precision();
    Ok(alpha
        .0
        .iter()
        .enumerate()
        .map(|(c, a)| {
            let p = a / s;
            let yc = if c == y.class { 1.0 } else { 0.0 };
            (yc - p) * (yc - p) + p * (1.0 - p) / (s + 1.0)
        })
        .sum())
}

/// `KL(Dir(α) ‖ Dir(1))`.
pub fn kl_to_uniform(alpha: &ConcentrationVector) -> f64 {
    let a: Vec<f64> = alpha.0.iter().map(|&v| floor_alpha(v)).collect();
    let c = a.len() as f64;
    let s: f64 = a.iter().sum();
    let psi_s = digamma(s);
    let mut kl = ln_gamma(s) - ln_gamma(c);
    for &ac in &a {
        kl -= ln_gamma(ac);
        kl += (ac - 1.0) * (digamma(ac) - psi_s);
    }
    // analytically ≥ 0; cancellation can leave a few ulps below zero near α = 1
    kl.max(0.0)
}

/// The full per-sample evidential loss.
pub fn edl_loss(alpha: &ConcentrationVector, y: &OneHotLabel, cfg: &LossConfig) -> Result<f64> {
    let mse = expected_mse(alpha, y)?;
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    Ok(mse + cfg.lambda * kl_to_uniform(&masked_alpha(alpha, y)?))
}

/// Gradient of [`edl_loss`] with respect to the concentration parameters.
pub fn loss_grad_wrt_alpha(
    alpha: &ConcentrationVector,
    y: &OneHotLabel,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    check_len(alpha, y)?;
    let a = &alpha.0;
    let t = y.class;
    let s = alpha.precision();
    let p: Vec<f64> = a.iter().map(|v| v / s).collect();
    let q: f64 = p.iter().map(|v| v * v).sum();
    // MSE = 1 − 2 p_t + Q·S/(S+1) + 1/(S+1),  Q = Σ p_c²
    let mut grad: Vec<f64> = (0..a.len())
        .map(|k| {
            let delta = if k == t { 1.0 } else { 0.0 };
            -2.0 * (delta - p[t]) / s
                + 2.0 * (p[k] - q) / (s + 1.0)
                + (q - 1.0) / ((s + 1.0) * (s + 1.0))
        })
        .collect();

    if cfg.lambda > 0.0 {
        // ∂KL/∂α̃_k = (α̃_k − 1) ψ'(α̃_k) − (S̃ − C) ψ'(S̃); the true class is pinned to 1.
        let masked: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(c, &v)| if c == t { 1.0 } else { floor_alpha(v) })
            .collect();
        let c = masked.len() as f64;
        let s_m: f64 = masked.iter().sum();
        let common = (s_m - c) * trigamma(s_m);
        for (k, g) in grad.iter_mut().enumerate() {
            if k != t {
                *g += cfg.lambda * ((masked[k] - 1.0) * trigamma(masked[k]) - common);
            }
        }
    }
    Ok(grad)
}

/// Gradient of `edl_loss(exp(s·z), y)` with respect to the logits `z`.
///
/// `scale` is the density factor `s ∈ [0, 1]`; training uses `s = 1`.
pub fn loss_grad_wrt_logits(
    logits: &[f64],
    y: &OneHotLabel,
    cfg: &LossConfig,
    scale: f64,
) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return domain("non-finite logit");
    }
    if !(0.0..=1.0).contains(&scale) {
        return domain(format!("scale must lie in [0, 1], got {scale}"));
    }
    let raw: Vec<f64> = logits.iter().map(|z| (z * scale).exp()).collect();
    let alpha = ConcentrationVector::new(
        raw.iter()
            .map(|a| a.clamp(ALPHA_FLOOR, ALPHA_CEIL))
            .collect(),
    )?;
    let g = loss_grad_wrt_alpha(&alpha, y, cfg)?;
    Ok(g.iter()
        .zip(&raw)
        .map(|(g, &a)| {
            // clamped components do not move with z
            if (ALPHA_FLOOR..=ALPHA_CEIL).contains(&a) {
                g * scale * a
            } else {
                0.0
            }
        })
        .collect())
}

/// Shannon entropy (nats) of a probability vector, with `0 ln 0 = 0`.
pub fn categorical_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return domain("empty probability vector");
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return domain("probability components must be non-negative");
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return domain(format!("probabilities sum to {total}, not 1"));
    }
    Ok(p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| -v * v.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn floor_alpha(v: f64) -> f64 {
    if v < ALPHA_FLOOR {
        log::debug!("concentration {v:e} clamped to {ALPHA_FLOOR:e} before log-gamma");
        ALPHA_FLOOR
    } else {
        v
    }
}

fn check_len(alpha: &ConcentrationVector, y: &OneHotLabel) -> Result<()> {
    if alpha.num_classes() != y.num_classes {
        return domain(format!(
            "alpha has {} classes but label has {}",
            alpha.num_classes(),
            y.num_classes
        ));
    }
    Ok(())
}
