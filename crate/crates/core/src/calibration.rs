//! Neighborhood size from a detection-error probability.
//!
//! `eps(p) = 4 Phi^{-1}(p)^2 / (n lambda_max)`, where `lambda_max` is the
//! largest eigenvalue of the whitened projected information.

use nalgebra::DVector;

use crate::error::{MmseError, Result};
use crate::exec;
use crate::linalg;
use crate::neighborhoods::WeightedEuclidean;
use crate::normal;
use crate::parametric::{ProjectedBundle, ReferenceModel};
use crate::rng;

/// Eigenvalues at or below this are treated as "no detectable direction".
pub const LAMBDA_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub p: f64,
    pub epsilon: f64,
    pub lambda_max_used: f64,
    pub n: usize,
}

fn check_p_n(p: f64, n: usize) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MmseError::InvalidInput(format!("p must lie in (0,1), got {p}")));
    }
    if n == 0 {
        return Err(MmseError::InvalidInput("n must be >= 1".into()));
    }
    Ok(())
}

fn epsilon_from_lambda(p: f64, n: usize, lambda: f64) -> CalibrationResult {
    let z = normal::inv_cdf(p);
    CalibrationResult {
        p,
        epsilon: 4.0 * z * z / (n as f64 * lambda),
        lambda_max_used: lambda,
        n,
    }
}

/// Parametric rule with `lambda_max(Omega^{-1/2} H_tilde Omega^{-1/2})`.
pub fn epsilon_parametric(p: f64, n: usize, projected: &ProjectedBundle, omega: &WeightedEuclidean) -> Result<CalibrationResult> {
    check_p_n(p, n)?;
    let w = linalg::inv_sqrt_spd(omega.omega(), "omega")?;
    let lambda = linalg::lambda_max_sym(&(&w * &projected.h_tilde * &w));
    if lambda <= LAMBDA_FLOOR {
        return Err(MmseError::UnboundedEpsilon { lambda_max: lambda });
    }
    Ok(epsilon_from_lambda(p, n, lambda))
}

/// Semi-parametric rule; `lambda_max = 1` when the reference parameters are known.
pub fn epsilon_semiparam(p: f64, n: usize, lambda_max: f64) -> Result<CalibrationResult> {
    check_p_n(p, n)?;
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(MmseError::InvalidInput(format!("lambda_max must be positive, got {lambda_max}")));
    }
    Ok(epsilon_from_lambda(p, n, lambda_max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionError {
    pub estimate: f64,
    pub se: f64,
}

/// Monte Carlo probability of detection error between `f_theta0` and
/// `f_theta(eta)` for samples of size `n`: the average of the two
/// likelihood-ratio misclassification probabilities (ties count one half).
pub fn detection_error_mc<M: ReferenceModel>(
    model: &M,
    theta0: &DVector<f64>,
    eta: &DVector<f64>,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<DetectionError> {
    if reps < 100 {
        return Err(MmseError::InvalidInput("at least 100 replications".into()));
    }
    if n == 0 {
        return Err(MmseError::InvalidInput("n must be >= 1".into()));
    }
    let theta1 = model.theta_of_eta(eta);
    let llr = |y: &M::Obs| model.log_density(y, theta0) - model.log_density(y, &theta1);
    let outcomes = exec::try_par_map(reps, |r| {
        let mut g = rng::stream(seed, &[0x4445_5445, r as u64]);
        let mut l0 = 0.0;
        let mut l1 = 0.0;
        for _ in 0..n {
            let y0 = model
                .simulate(theta0, None, &mut g)
                .ok_or_else(|| MmseError::InvalidInput("model has no sampler".into()))?;
            l0 += llr(&y0);
            let y1 = model
                .simulate(&theta1, None, &mut g)
                .ok_or_else(|| MmseError::InvalidInput("model has no sampler".into()))?;
            l1 += llr(&y1);
        }
        let miss = |l: f64, wrong_sign: bool| {
            if l == 0.0 {
                0.5
            } else if (l < 0.0) == wrong_sign {
                1.0
            } else {
                0.0
            }
        };
        // Data from theta0 are misclassified when the LLR favors theta1, and vice versa.
        Ok::<_, MmseError>(0.5 * (miss(l0, true) + miss(l1, false)))
    })?;
    let est = linalg::mean(&outcomes);
    Ok(DetectionError {
        estimate: est,
        se: linalg::sample_sd(&outcomes) / (reps as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn semiparam_values() {
        let r = epsilon_semiparam(0.01, 500, 1.0).unwrap();
        assert!((r.epsilon - 0.043_295_155_4).abs() < 1e-9);
        let r = epsilon_semiparam(1e-10, 500, 1.0).unwrap();
        assert!((r.epsilon - 0.323_733).abs() < 1e-5);
        assert_eq!(epsilon_semiparam(0.5, 500, 1.0).unwrap().epsilon, 0.0);
        assert!(epsilon_semiparam(0.01, 500, 0.0).is_err());
        assert!(epsilon_semiparam(0.0, 500, 1.0).is_err());
    }

    #[test]
    fn monotone_in_p() {
        let ps = [1e-10, 1e-5, 0.01, 0.1, 0.4];
        let eps: Vec<f64> = ps.iter().map(|&p| epsilon_semiparam(p, 100, 1.0).unwrap().epsilon).collect();
        assert!(eps.windows(2).all(|w| w[0] > w[1]));
    }

    proptest! {
        #[test]
        fn strictly_decreasing(p1 in 1e-12f64..0.49, gap in 1e-6f64..0.01) {
            let p2 = (p1 + gap).min(0.4999);
            prop_assume!(p2 > p1);
            let a = epsilon_semiparam(p1, 500, 0.7).unwrap().epsilon;
            let b = epsilon_semiparam(p2, 500, 0.7).unwrap().epsilon;
            prop_assert!(a > b);
        }
    }
}
