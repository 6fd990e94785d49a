//! Worst-case bias and MSE as functions of the panel length `T`, evaluated at
//! the true parameters for individuals with a fixed initial condition.

use mmse_core::calibration::epsilon_semiparam;
use mmse_core::exec;
use mmse_core::rng::derive_key;
use mmse_core::semiparam::{
    bias_eb, bias_of_plan, bias_re, simulate_panel, CondMean, Evaluator, Influence, ModelTarget, SemiparamPlan,
};

use crate::config::ExperimentConfig;
use crate::error::Result;

const CURVE: u64 = 0x4355_5256;

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub t: usize,
    pub p: f64,
    pub epsilon: f64,
    pub estimator: String,
    pub bias: f64,
    /// Simulation standard error of `bias` (random effects only).
    pub bias_se: Option<f64>,
    pub variance: f64,
    /// `bias^2 + variance / n`.
    pub mse: f64,
}

/// Delta-method standard error of `sqrt(eps) * sd(Delta)` over `S` latent draws.
fn sd_standard_error(values: &[(f64, f64)], s: f64) -> f64 {
    let mean: f64 = values.iter().map(|(v, m)| v * m).sum::<f64>() / s;
    let m2: f64 = values.iter().map(|(v, m)| m * (v - mean).powi(2)).sum::<f64>() / s;
    let m4: f64 = values.iter().map(|(v, m)| m * (v - mean).powi(4)).sum::<f64>() / s;
    if m2 <= 0.0 {
        return 0.0;
    }
    ((m4 - m2 * m2).max(0.0) / s).sqrt() / (2.0 * m2.sqrt())
}

fn rows_for_t(cfg: &ExperimentConfig, t: usize) -> Result<Vec<CurveRow>> {
    let model = cfg.model(t)?;
    let mix = model.mixture(false);
    let panel = simulate_panel(&mix, cfg.s, derive_key(cfg.seed, &[CURVE, t as u64]))?;
    let mut weights = vec![0.0; 2];
    weights[cfg.curve_y0 as usize] = 1.0;
    let target = ModelTarget(&mix);
    let ev = Evaluator::new(&mix, &panel, &target, &weights)?;
    let method = CondMean::Enumerate;
    let c = &panel.cells[cfg.curve_y0 as usize];
    let delta_atoms: Vec<(f64, f64)> = c
        .a_atoms
        .iter()
        .zip(c.a_counts.iter())
        .map(|(&a, &m)| (mmse_core::models::probit::probit_delta(a, model.beta), m))
        .collect();
    let sd_se = sd_standard_error(&delta_atoms, c.s as f64);
    let var_eb = ev.variance(Influence::EmpiricalBayes)?;
    let mut rows = Vec::new();
    for &p in &cfg.p {
        let eps = epsilon_semiparam(p, cfg.n, cfg.lambda_max)?.epsilon;
        let n = cfg.n as f64;
        let plan = SemiparamPlan::new(&panel, &target, eps * n, &weights)?;
        let var_mmse = ev.variance(Influence::Plan(&plan))?;
        let entries = [
            ("RE".to_string(), bias_re(&ev, eps, method)?, Some(eps.sqrt() * sd_se), 0.0),
            ("EB".to_string(), bias_eb(&ev, eps, method)?, None, var_eb),
            ("MMSE".to_string(), bias_of_plan(&ev, &plan, eps, method)?, None, var_mmse),
        ];
        for (estimator, bias, bias_se, variance) in entries {
            rows.push(CurveRow { t, p, epsilon: eps, estimator, bias, bias_se, variance, mse: bias * bias + variance / n });
        }
    }
    Ok(rows)
}

/// One row per `(T, p, estimator)`.
pub fn run_bias_curves(cfg: &ExperimentConfig) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    let per_t = exec::try_par_map(cfg.t_grid.len(), |i| rows_for_t(cfg, cfg.t_grid[i]))?;
    Ok(per_t.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_and_scaling_at_short_panels() {
        let cfg = ExperimentConfig { t_grid: vec![2, 4], s: 300, ..ExperimentConfig::default() };
        let rows = run_bias_curves(&cfg).unwrap();
        let get = |t: usize, p: f64, e: &str| rows.iter().find(|r| r.t == t && r.p == p && r.estimator == e).unwrap().clone();
        for t in [2, 4] {
            let re = get(t, 0.01, "RE");
            let eb = get(t, 0.01, "EB");
            let mm = get(t, 0.01, "MMSE");
            assert!(mm.mse <= eb.mse.min(re.mse) + 1e-12);
            assert!(eb.bias <= re.bias);
            let ratio = get(t, 1e-10, "RE").bias / re.bias;
            assert!((ratio - 6.361_340_902_404_056 / 2.326_347_874_040_841).abs() < 1e-9);
        }
    }
}
