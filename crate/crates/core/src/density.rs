//! Gaussian discriminant analysis in feature space.
//!
//! One Gaussian per class with weight `N_c / N`, the class mean and the
//! unbiased (`N_c − 1`) covariance. The mixture log density of a feature vector
//! is min-max scaled against the training range and clipped to `[0, 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{chol_log_det, cholesky, forward_substitute, log_sum_exp, Matrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter added to every covariance diagonal before factorization.
pub const BASE_JITTER: f64 = 1e-6;
/// Number of ×10 escalations tried when the factorization still fails.
pub const MAX_JITTER_ESCALATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Full,
    /// Off-diagonal entries dropped; for very wide feature spaces.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdaModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Lower Cholesky factors of the regularized class covariances.
    pub cov_factors: Vec<Matrix>,
    pub log_dets: Vec<f64>,
    /// Relative jitter that made each factorization succeed.
    pub jitter: Vec<f64>,
    pub covariance: CovarianceKind,
    pub d_min: f64,
    pub d_max: f64,
}

impl GdaModel {
    /// Fits full-covariance class Gaussians and records the training log-density range.
    pub fn fit(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        Self::fit_with(features, labels, num_classes, CovarianceKind::Full)
    }

    pub fn fit_with(
        features: &Matrix,
        labels: &[usize],
        num_classes: usize,
        kind: CovarianceKind,
    ) -> Result<Self> {
        let (n, h) = (features.rows(), features.cols());
        if labels.len() != n {
            return domain(format!("{n} feature rows but {} labels", labels.len()));
        }
        if num_classes == 0 || h == 0 {
            return domain("need at least one class and one feature");
        }
        if !features.is_finite() {
            return domain("non-finite features");
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return domain(format!("label {l} out of range for {num_classes} classes"));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k < 2) {
            return domain(format!(
                "class {c} has {} samples; at least 2 are required",
                counts[c]
            ));
        }

        let mut means = vec![vec![0.0; h]; num_classes];
        for (row, &l) in features.iter_rows().zip(labels) {
            for (m, v) in means[l].iter_mut().zip(row) {
                *m += v;
            }
        }
        for (m, &k) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= k as f64);
        }

        let mut covs = vec![Matrix::zeros(h, h); num_classes];
        let mut centered = vec![0.0; h];
        for (row, &l) in features.iter_rows().zip(labels) {
            for ((c, v), m) in centered.iter_mut().zip(row).zip(&means[l]) {
                *c = v - m;
            }
            let cov = &mut covs[l];
            for i in 0..h {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                // lower triangle only; mirrored below
                for j in 0..=i {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        let mut cov_factors = Vec::with_capacity(num_classes);
        let mut log_dets = Vec::with_capacity(num_classes);
        let mut jitter = Vec::with_capacity(num_classes);
        for (c, (cov, &k)) in covs.iter_mut().zip(&counts).enumerate() {
            let denom = (k - 1) as f64;
            for i in 0..h {
                for j in 0..=i {
                    let v = cov[(i, j)] / denom;
                    let v = if kind == CovarianceKind::Diagonal && i != j {
                        0.0
                    } else {
                        v
                    };
                    cov[(i, j)] = v;
                    cov[(j, i)] = v;
                }
            }
            let (l, eps) = regularized_cholesky(cov).ok_or_else(|| {
                Error::Numeric(format!(
                    "covariance of class {c} is not positive definite after jitter escalation"
                ))
            })?;
            log_dets.push(chol_log_det(&l));
            cov_factors.push(l);
            jitter.push(eps);
        }

        let mut model = Self {
            weights: counts.iter().map(|&k| k as f64 / n as f64).collect(),
            means,
            cov_factors,
            log_dets,
            jitter,
            covariance: kind,
            d_min: 0.0,
            d_max: 0.0,
        };
        let train_logp = model.log_density_rows(features)?;
        model.d_min = train_logp.iter().copied().fold(f64::INFINITY, f64::min);
        model.d_max = train_logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Per-class `ln ω_c + ln N(z | μ_c, Σ_c)`.
    pub fn class_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        let h = self.feature_dim();
        if z.len() != h {
            return domain(format!(
                "feature vector has {} dims, model expects {h}",
                z.len()
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return domain("non-finite feature vector");
        }
        let mut diff = vec![0.0; h];
        Ok((0..self.num_classes())
            .map(|c| {
                for ((d, v), m) in diff.iter_mut().zip(z).zip(&self.means[c]) {
                    *d = v - m;
                }
                let w = forward_substitute(&self.cov_factors[c], &diff);
                let maha: f64 = w.iter().map(|v| v * v).sum();
                self.weights[c].ln() - 0.5 * (h as f64 * LN_2PI + self.log_dets[c] + maha)
            })
            .collect())
    }

    /// `ln Σ_c ω_c N(z | μ_c, Σ_c)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.class_log_joint(z)?))
    }

    /// Log density of every row, evaluated in parallel.
    pub fn log_density_rows(&self, features: &Matrix) -> Result<Vec<f64>> {
        (0..features.rows())
            .into_par_iter()
            .map(|i| self.log_density(features.row(i)))
            .collect()
    }

    /// `Clip((log_p − d_min) / (d_max − d_min))`. A degenerate training range
    /// maps to a step at `d_max`.
    pub fn normalize(&self, log_p: f64) -> f64 {
        normalize_log_density(log_p, self.d_min, self.d_max)
    }
}

pub fn normalize_log_density(log_p: f64, d_min: f64, d_max: f64) -> f64 {
    if d_max <= d_min {
        log::warn!("degenerate training log-density range [{d_min}, {d_max}]");
        return if log_p >= d_max { 1.0 } else { 0.0 };
    }
    if log_p.is_nan() {
        return 0.0;
    }
    ((log_p - d_min) / (d_max - d_min)).clamp(0.0, 1.0)
}

/// Adds `ε · tr(Σ)/H · I`, escalating `ε` until the factorization succeeds.
fn regularized_cholesky(cov: &Matrix) -> Option<(Matrix, f64)> {
    let h = cov.rows();
    let trace: f64 = (0..h).map(|i| cov[(i, i)]).sum();
    let scale = if trace > 0.0 { trace / h as f64 } else { 1.0 };
    let mut eps = BASE_JITTER;
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        let mut reg = cov.clone();
        for i in 0..h {
            reg[(i, i)] += eps * scale;
        }
        if let Some(l) = cholesky(&reg) {
            if attempt > 0 {
                log::debug!("covariance needed jitter {eps:e} after {attempt} escalations");
            }
            return Some((l, eps));
        }
        eps *= 10.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> (Matrix, Vec<usize>) {
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, 4.0],
        ])
        .unwrap();
        (x, vec![0, 0, 1, 1])
    }

    #[test]
    fn fit_weights_and_means() {
        let (x, y) = toy();
        let m = GdaModel::fit(&x, &y, 2).unwrap();
        assert_eq!(m.weights, vec![0.5, 0.5]);
        assert_eq!(m.means, vec![vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert!(m.d_min <= m.d_max);
    }

    #[test]
    fn singular_covariance_takes_jitter_path() {
        // raw Σ₀ = [[2, 0], [0, 0]] with the N_c − 1 = 1 denominator
        let (x, y) = toy();
        let m = GdaModel::fit(&x, &y, 2).unwrap();
        let l = &m.cov_factors[0];
        let cov00 = l[(0, 0)] * l[(0, 0)];
        let cov11 = l[(1, 0)] * l[(1, 0)] + l[(1, 1)] * l[(1, 1)];
        let jitter = m.jitter[0] * 1.0; // tr/H = 1
        assert!((cov00 - (2.0 + jitter)).abs() < 1e-12);
        assert!((cov11 - jitter).abs() < 1e-12);
        assert!(l[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_tiny_classes() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let err = GdaModel::fit(&x, &[0, 0, 1], 2).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn fit_is_order_invariant() {
        let x = Matrix::from_rows(&[
            vec![0.1, 0.3],
            vec![1.2, -0.4],
            vec![0.7, 0.9],
            vec![3.0, 3.1],
            vec![2.2, 2.9],
            vec![2.5, 3.7],
        ])
        .unwrap();
        let y = vec![0, 0, 0, 1, 1, 1];
        let a = GdaModel::fit(&x, &y, 2).unwrap();
        let perm = [4, 1, 5, 0, 3, 2];
        let xs = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let ys: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let b = GdaModel::fit(&xs, &ys, 2).unwrap();
        assert_eq!(a.weights, b.weights);
        for (p, q) in a.means.iter().flatten().zip(b.means.iter().flatten()) {
            assert!((p - q).abs() < 1e-14);
        }
        for (p, q) in a.cov_factors.iter().zip(&b.cov_factors) {
            for (u, v) in p.as_slice().iter().zip(q.as_slice()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_data_keeps_weights_and_means() {
        let (x, y) = toy();
        let rows: Vec<Vec<f64>> = x
            .iter_rows()
            .chain(x.iter_rows())
            .map(<[f64]>::to_vec)
            .collect();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let a = GdaModel::fit(&x, &y, 2).unwrap();
        let b = GdaModel::fit(&Matrix::from_rows(&rows).unwrap(), &y2, 2).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.means, b.means);
    }

    #[test]
    fn log_density_at_mean_of_single_class() {
        let x = Matrix::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, -1.0],
            vec![1.0, 3.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let m = GdaModel::fit(&x, &[0; 4], 1).unwrap();
        let want = -LN_2PI - 0.5 * m.log_dets[0];
        assert!((m.log_density(&m.means[0].clone()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn log_density_decreases_along_a_ray() {
        let (x, y) = toy();
        let m = GdaModel::fit(&x, &y, 2).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..50 {
            let t = k as f64;
            let v = m.log_density(&[1.0 + 3.0 * t, -2.0 * t]).unwrap();
            assert!(v.is_finite() && v < last);
            last = v;
        }
        assert!(m.log_density(&[f64::NAN, 0.0]).is_err());
        assert!(m.log_density(&[0.0]).is_err());
    }

    #[test]
    fn normalize_boundaries() {
        let (x, y) = toy();
        let m = GdaModel::fit(&x, &y, 2).unwrap();
        assert_eq!(m.normalize(m.d_max), 1.0);
        assert_eq!(m.normalize(m.d_min), 0.0);
        assert_eq!(m.normalize(m.d_min - 100.0), 0.0);
        assert!((m.normalize(0.5 * (m.d_min + m.d_max)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_range_is_a_step() {
        assert_eq!(normalize_log_density(3.0, 3.0, 3.0), 1.0);
        assert_eq!(normalize_log_density(2.9, 3.0, 3.0), 0.0);
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, lo in -50.0f64..0.0, w in 0.1f64..80.0) {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let (sa, sb) = (normalize_log_density(a, lo, lo + w), normalize_log_density(b, lo, lo + w));
            prop_assert!(sa <= sb);
            prop_assert!((0.0..=1.0).contains(&sa) && (0.0..=1.0).contains(&sb));
        }
    }
}
