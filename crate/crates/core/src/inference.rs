//! Worst-case bias and bias-aware confidence intervals.

use nalgebra::DVector;

use crate::error::{MmseError, Result};
use crate::neighborhoods::{dual_norm_euclidean, dual_norm_kl, WeightedEuclidean};
use crate::normal;

/// Summary of a (possibly bias-adjusted) point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimator: String,
    pub point: f64,
    pub bias_bound: f64,
    pub sd_h: f64,
    pub n: usize,
    pub ci_robust: (f64, f64),
    pub ci_nonrobust: (f64, f64),
    pub ci_ak: (f64, f64),
    pub epsilon: f64,
    pub p: Option<f64>,
    pub mu: f64,
}

impl EstimateReport {
    pub fn new(
        estimator: impl Into<String>,
        point: f64,
        bias_bound: f64,
        sd_h: f64,
        n: usize,
        epsilon: f64,
        p: Option<f64>,
        mu: f64,
    ) -> Result<Self> {
        Ok(Self {
            estimator: estimator.into(),
            point,
            bias_bound,
            sd_h,
            n,
            ci_robust: confidence_interval(point, bias_bound, sd_h, n, mu)?,
            ci_nonrobust: confidence_interval(point, 0.0, sd_h, n, mu)?,
            ci_ak: confidence_interval_ak(point, bias_bound, sd_h, n, mu)?,
            epsilon,
            p,
            mu,
        })
    }

    pub fn robust_covers(&self, truth: f64) -> bool {
        self.ci_robust.0 <= truth && truth <= self.ci_robust.1
    }
}

/// `sqrt(eps) * || grad_delta - E[h grad log f] ||_{Omega^{-1}}`.
pub fn worst_case_bias(
    grad_delta: &DVector<f64>,
    h_score_cov: &DVector<f64>,
    omega: &WeightedEuclidean,
    epsilon: f64,
) -> Result<f64> {
    if grad_delta.len() != h_score_cov.len() {
        return Err(MmseError::DimensionMismatch {
            context: "worst_case_bias",
            expected: grad_delta.len(),
            got: h_score_cov.len(),
        });
    }
    Ok(epsilon.sqrt() * dual_norm_euclidean(&(grad_delta - h_score_cov), omega)?)
}

/// KL version: `sqrt(eps) * sd(Delta - E[h | A])` over reference draws.
pub fn worst_case_bias_kl(discrepancy: &[f64], weights: &[f64], epsilon: f64) -> Result<f64> {
    Ok(epsilon.sqrt() * dual_norm_kl(discrepancy, weights)?)
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu < 1.0 {
        Ok(())
    } else {
        Err(MmseError::InvalidInput(format!("mu must lie in (0,1), got {mu}")))
    }
}

/// `point +/- (bias_bound + sd_h * c_{1-mu/2} / sqrt(n))`.
pub fn confidence_interval(point: f64, bias_bound: f64, sd_h: f64, n: usize, mu: f64) -> Result<(f64, f64)> {
    check_mu(mu)?;
    if n == 0 {
        return Err(MmseError::InvalidInput("n must be >= 1".into()));
    }
    let c = normal::inv_cdf(1.0 - mu / 2.0);
    let half = bias_bound + sd_h * c / (n as f64).sqrt();
    Ok((point - half, point + half))
}

/// CDF of `|N(1, s^2)|` at `q`.
fn folded_cdf(q: f64, s: f64) -> f64 {
    normal::cdf((q - 1.0) / s) - normal::cdf((-q - 1.0) / s)
}

/// `(1 - mu)` quantile of `|N(1, s^2)|` by bisection.
pub fn folded_normal_quantile(s: f64, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    if s == 0.0 {
        return Ok(1.0);
    }
    let target = 1.0 - mu;
    let mut lo = if folded_cdf(1.0, s) > target { 0.0 } else { 1.0 };
    let mut hi = 1.0 + 10.0 * s;
    while folded_cdf(hi, s) < target {
        hi = 1.0 + 2.0 * (hi - 1.0);
        if !hi.is_finite() {
            return Err(MmseError::NonConvergence("folded normal bracket".into()));
        }
    }
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        if folded_cdf(mid, s) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            return Ok(hi);
        }
    }
    Err(MmseError::NonConvergence("folded normal quantile".into()))
}

/// Shorter bias-aware interval: half-width `b * q`, where `q` is the
/// `(1 - mu)` quantile of `|N(1, sd_h^2 / (b^2 n))|`.
pub fn confidence_interval_ak(point: f64, bias_bound: f64, sd_h: f64, n: usize, mu: f64) -> Result<(f64, f64)> {
    if !(bias_bound > 0.0) {
        return confidence_interval(point, 0.0, sd_h, n, mu);
    }
    check_mu(mu)?;
    let s = sd_h / (bias_bound * (n as f64).sqrt());
    let half = bias_bound * folded_normal_quantile(s, mu)?;
    Ok((point - half, point + half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wald_and_robust_examples() {
        let (lo, hi) = confidence_interval(0.0, 0.0, 1.0, 100, 0.05).unwrap();
        assert!((hi - 0.195_996_398_454_005_4).abs() < 1e-9 && (lo + hi).abs() < 1e-15);
        let (_, hi) = confidence_interval(0.0, 0.3, 0.0, 100, 0.05).unwrap();
        assert!((hi - 0.3).abs() < 1e-15);
        let (_, hi) = confidence_interval(0.0, 0.01, 1.0, 100, 0.05).unwrap();
        assert!((hi - 0.205_996_398_454_005_4).abs() < 1e-9);
        assert!(confidence_interval(0.0, 0.0, 1.0, 100, 1.5).is_err());
    }

    #[test]
    fn ak_limits() {
        let (_, hi) = confidence_interval_ak(0.0, 0.2, 1e-9, 100, 0.05).unwrap();
        assert!((hi - 0.2).abs() < 1e-8);
        // Bias dominates: the AK half-length tends to b + z_{1-mu} se.
        let (b, sd, n) = (1.0, 1.0, 10_000);
        let (_, ak) = confidence_interval_ak(0.0, b, sd, n, 0.05).unwrap();
        let (_, st) = confidence_interval(0.0, b, sd, n, 0.05).unwrap();
        let se = sd / (n as f64).sqrt();
        let limit = (b + 1.644_854 * se) / (b + 1.959_964 * se);
        assert!(ak / st < 1.0 && (ak / st - limit).abs() < 1e-5);
    }

    #[test]
    fn ak_between_bias_and_standard() {
        let (sd, n) = (2.0, 400usize);
        let b = sd / (n as f64).sqrt();
        let (_, hi) = confidence_interval_ak(0.0, b, sd, n, 0.05).unwrap();
        assert!(hi > b && hi < b + 1.959_963_984_540_054 * sd / (n as f64).sqrt());
        // The quantile solves the folded-normal CDF equation.
        let q = hi / b;
        assert!((folded_cdf(q, 1.0) - 0.95).abs() < 1e-9);
    }

    #[test]
    fn worst_case_bias_plug_in() {
        let g = DVector::from_vec(vec![3.0, 4.0]);
        let z = DVector::zeros(2);
        let b = worst_case_bias(&g, &z, &WeightedEuclidean::identity(2), 0.04).unwrap();
        assert!((b - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn ak_inside_robust(b in 1e-6f64..5.0, sd in 0.0f64..5.0, n in 1usize..5000, mu in 0.01f64..0.3) {
            let r = confidence_interval(1.0, b, sd, n, mu).unwrap();
            let a = confidence_interval_ak(1.0, b, sd, n, mu).unwrap();
            prop_assert!(a.0 >= r.0 - 1e-9 && a.1 <= r.1 + 1e-9);
            let rep = EstimateReport::new("x", 1.0, b, sd, n, 0.1, None, mu).unwrap();
            prop_assert!(rep.ci_robust.0 <= rep.ci_nonrobust.0 && rep.ci_nonrobust.1 <= rep.ci_robust.1);
            prop_assert!(rep.robust_covers(1.0));
        }
    }
}
