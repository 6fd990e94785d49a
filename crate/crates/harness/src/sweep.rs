//! Sensitivity of the estimators to a shift in the mean of the random effects.

use mmse_core::models::probit::Dgp;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::montecarlo::{run_cell, Quantity};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub nu: f64,
    /// `nu^2 / sigma^2`, twice the KL divergence from the reference.
    pub twice_kl: f64,
    pub estimator: String,
    pub quantity: Quantity,
    pub truth: f64,
    pub mean: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    pub bias: f64,
    pub mse: f64,
}

/// Runs the Monte Carlo design once per `nu` in `cfg.nu_grid`. All grid
/// points share the master seed.
pub fn run_misspec_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &nu in &cfg.nu_grid {
        let dgp = Dgp::Shifted(nu);
        let res = run_cell(cfg, cfg.t, dgp)?;
        let twice_kl = dgp.twice_kl(cfg.sigma).expect("closed form for shifted normal");
        for s in &res.summaries {
            rows.push(SweepRow {
                nu,
                twice_kl,
                estimator: s.estimator.clone(),
                quantity: s.quantity,
                truth: s.truth,
                mean: s.mean,
                p2_5: s.p2_5,
                p97_5: s.p97_5,
                bias: s.bias,
                mse: s.mse,
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of the mean estimate on `nu^2`.
pub fn slope_in_nu_squared(rows: &[SweepRow], estimator: &str, quantity: Quantity) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.estimator == estimator && r.quantity == quantity)
        .map(|r| (r.nu * r.nu, r.mean))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_axis_and_slope() {
        assert!((Dgp::Shifted(0.4).twice_kl(0.8).unwrap() - 0.16 / 0.64).abs() < 1e-15);
        let rows: Vec<SweepRow> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&nu| SweepRow {
                nu,
                twice_kl: 0.0,
                estimator: "RE".into(),
                quantity: Quantity::Delta,
                truth: 0.0,
                mean: 2.0 * nu * nu + 1.0,
                p2_5: 0.0,
                p97_5: 0.0,
                bias: 0.0,
                mse: 0.0,
            })
            .collect();
        assert!((slope_in_nu_squared(&rows, "RE", Quantity::Delta).unwrap() - 2.0).abs() < 1e-12);
        assert!(slope_in_nu_squared(&rows, "EB", Quantity::Delta).is_none());
    }
}
