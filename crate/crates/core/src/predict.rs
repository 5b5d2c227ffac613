//! Concentration parameters for training and prediction, and the per-sample
//! uncertainty scores derived from them.
//!
//! Training uses `α = exp(z)`. At prediction time the logits are scaled by the
//! normalized feature density `s ∈ [0, 1]`, `α = exp(s·z)`, so the expected
//! class probabilities equal `softmax(z / T)` with the sample-dependent
//! temperature `T = 1/s`, and `s = 0` collapses to the uniform Dirichlet.

use serde::{Deserialize, Serialize};

use crate::density::GdaModel;
use crate::dirichlet::{categorical_entropy, ConcentrationVector, ALPHA_CEIL, ALPHA_FLOOR};
use crate::error::{domain, Result};
use crate::network::EvidentialNetwork;

/// How logits become concentration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `α = exp(z)`
    #[default]
    Exp,
    /// `α = 1 + relu(z)`
    ReluPlusOne,
    /// `α = 1 + softplus(z)`
    SoftplusPlusOne,
}

impl Parameterization {
    pub fn alpha(self, logits: &[f64]) -> Result<ConcentrationVector> {
        match self {
            Self::Exp => alpha_train(logits),
            Self::ReluPlusOne => alpha_edl_conventional(logits, EvidenceActivation::Relu),
            Self::SoftplusPlusOne => alpha_edl_conventional(logits, EvidenceActivation::Softplus),
        }
    }

    /// `dα_c / dz_c`; every parameterization acts componentwise.
    pub fn alpha_derivative(self, z: f64) -> f64 {
        match self {
            Self::Exp => {
                let a = z.exp();
                if (ALPHA_FLOOR..=ALPHA_CEIL).contains(&a) {
                    a
                } else {
                    0.0
                }
            }
            Self::ReluPlusOne => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::SoftplusPlusOne => sigmoid(z),
        }
    }
}

impl std::str::FromStr for Parameterization {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Self::Exp),
            "relu_plus_one" => Ok(Self::ReluPlusOne),
            "softplus_plus_one" => Ok(Self::SoftplusPlusOne),
            other => domain(format!("unknown parameterization {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceActivation {
    Relu,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prior {
    /// Improper `Dir(0)`: the concentration itself is the pseudo-count.
    Zeros,
    /// Uniform `Dir(1)` of conventional evidential models.
    Ones,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) without overflow
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.iter().any(|z| !z.is_finite()) {
        return domain("non-finite logit");
    }
    Ok(())
}

fn clamped_exp(v: f64) -> f64 {
    let a = v.exp();
    if !(ALPHA_FLOOR..=ALPHA_CEIL).contains(&a) {
        log::debug!("exp({v}) clamped into [{ALPHA_FLOOR:e}, {ALPHA_CEIL:e}]");
        a.clamp(ALPHA_FLOOR, ALPHA_CEIL)
    } else {
        a
    }
}

/// Training-mode concentration `exp(z)`.
pub fn alpha_train(logits: &[f64]) -> Result<ConcentrationVector> {
    check_finite(logits)?;
    ConcentrationVector::new(logits.iter().map(|&z| clamped_exp(z)).collect())
}

/// Prediction-mode concentration `exp(z · s)`.
pub fn alpha_predict(logits: &[f64], s: f64) -> Result<ConcentrationVector> {
    if !(0.0..=1.0).contains(&s) {
        return domain(format!("density scale must lie in [0, 1], got {s}"));
    }
    check_finite(logits)?;
    ConcentrationVector::new(logits.iter().map(|&z| clamped_exp(z * s)).collect())
}

/// Conventional `1 + h(z)` concentration.
pub fn alpha_edl_conventional(
    logits: &[f64],
    activation: EvidenceActivation,
) -> Result<ConcentrationVector> {
    check_finite(logits)?;
    let h = |z: f64| match activation {
        EvidenceActivation::Relu => z.max(0.0),
        EvidenceActivation::Softplus => softplus(z),
    };
    ConcentrationVector::new(logits.iter().map(|&z| 1.0 + h(z)).collect())
}

/// Posterior pseudo-counts `α − prior`.
pub fn pseudo_counts(alpha: &ConcentrationVector, prior: Prior) -> Result<Vec<f64>> {
    match prior {
        Prior::Zeros => Ok(alpha.as_slice().to_vec()),
        Prior::Ones => {
            if let Some(a) = alpha.as_slice().iter().find(|&&a| a < 1.0) {
                return domain(format!(
                    "concentration {a} < 1 gives a negative pseudo-count under Dir(1)"
                ));
            }
            Ok(alpha.as_slice().iter().map(|a| a - 1.0).collect())
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub alpha: ConcentrationVector,
    pub probs: Vec<f64>,
    /// Largest expected class probability.
    pub aleatoric_conf: f64,
    /// Dirichlet precision α₀; larger means more in-distribution.
    pub epistemic_conf: f64,
    pub entropy: f64,
    /// Normalized feature density used to scale the logits.
    pub s: f64,
    pub predicted_class: usize,
    /// Mixture log density of the features, when a density model was used.
    pub log_density: Option<f64>,
}

impl PredictionOutput {
    fn from_alpha(alpha: ConcentrationVector, s: f64, log_density: Option<f64>) -> Result<Self> {
        let probs = alpha.expected_probs();
        let predicted_class = argmax(&probs);
        Ok(Self {
            aleatoric_conf: probs[predicted_class],
            epistemic_conf: alpha.precision(),
            entropy: categorical_entropy(&probs)?,
            probs,
            alpha,
            s,
            predicted_class,
            log_density,
        })
    }
}

/// Scores for given logits and density scale under a parameterization.
/// Non-exponential parameterizations see the scaled logits `s·z`.
pub fn scores_from_logits(
    param: Parameterization,
    logits: &[f64],
    s: f64,
    log_density: Option<f64>,
) -> Result<PredictionOutput> {
    let alpha = match param {
        Parameterization::Exp => alpha_predict(logits, s)?,
        p => {
            if !(0.0..=1.0).contains(&s) {
                return domain(format!("density scale must lie in [0, 1], got {s}"));
            }
            let scaled: Vec<f64> = logits.iter().map(|z| z * s).collect();
            p.alpha(&scaled)?
        }
    };
    PredictionOutput::from_alpha(alpha, s, log_density)
}

/// Density-aware prediction: features → mixture log density → clipped scale
/// `s` → `α = exp(s·z)`.
pub fn predict(net: &EvidentialNetwork, gda: &GdaModel, x: &[f64]) -> Result<PredictionOutput> {
    if gda.feature_dim() != net.feature_dim() {
        return domain(format!(
            "density model has {} features, network produces {}",
            gda.feature_dim(),
            net.feature_dim()
        ));
    }
    let (z, logits) = net.forward(x)?;
    let log_p = gda.log_density(&z)?;
    scores_from_logits(
        net.parameterization,
        &logits,
        gda.normalize(log_p),
        Some(log_p),
    )
}

/// Prediction without the density factor (`s = 1`).
pub fn predict_without_density(net: &EvidentialNetwork, x: &[f64]) -> Result<PredictionOutput> {
    let (_, logits) = net.forward(x)?;
    scores_from_logits(net.parameterization, &logits, 1.0, None)
}
