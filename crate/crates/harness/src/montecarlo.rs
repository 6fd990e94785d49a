//! Repeated-sampling experiments for the dynamic probit.
//!
//! Replication `r` draws its data from the substream `(seed, DATA, r)` and
//! its simulation panel from `(seed, PANEL, r)`. Every estimator in a
//! replication sees the same data set.

use std::time::Instant;

use mmse_core::calibration::epsilon_semiparam;
use mmse_core::exec;
use mmse_core::linalg;
use mmse_core::models::probit::{linear_probability, Dgp, DynProbitModel, ProbitData};
use mmse_core::rng::derive_key;
use mmse_core::semiparam::{
    self, bias_eb, bias_of_plan, bias_re, delta_eb, delta_mmse, delta_re, CondMean, Evaluator, ModelTarget,
    ParameterTarget, SemiparamPlan,
};
use sha2::{Digest, Sha256};

use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::{HarnessError, Result};

const DATA: u64 = 0x4441_5441;
const PANEL: u64 = 0x5041_4e4c;

/// Radius of the search interval for the maximum likelihood estimate of `beta`,
/// centered at the true value.
pub const MLE_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Quantity {
    Delta,
    Beta,
}

impl Quantity {
    pub fn name(&self) -> &'static str {
        match self {
            Quantity::Delta => "delta",
            Quantity::Beta => "beta",
        }
    }
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub estimator: String,
    pub quantity: Quantity,
    pub point: f64,
    pub bias_bound: Option<f64>,
    pub ci_robust: Option<(f64, f64)>,
    pub ci_ak: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub data_hash: String,
    pub beta_hat: f64,
    pub estimates: Vec<Estimate>,
}

pub fn p_label(p: f64) -> String {
    if p >= 1e-3 {
        format!("{p}")
    } else {
        format!("{p:e}")
    }
}

pub fn mmse_name(p: f64) -> String {
    format!("MMSE(p={})", p_label(p))
}

pub fn data_hash(data: &ProbitData) -> String {
    let mut h = Sha256::new();
    for p in &data.paths {
        h.update(p);
        h.update([0xff]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn with_report(
    name: String,
    quantity: Quantity,
    fit: &semiparam::SemiparamFit,
    bias: f64,
    eps: f64,
    p: f64,
    mu: f64,
) -> Result<Estimate> {
    let rep = semiparam::report(&name, fit, bias, eps, Some(p), mu)?;
    Ok(Estimate {
        estimator: name,
        quantity,
        point: fit.point,
        bias_bound: Some(bias),
        ci_robust: Some(rep.ci_robust),
        ci_ak: Some(rep.ci_ak),
    })
}

/// Estimates from one simulated data set.
pub fn estimate_on(cfg: &ExperimentConfig, truth: &DynProbitModel, data: &ProbitData, panel_seed: u64) -> Result<(f64, Vec<Estimate>)> {
    let beta_hat = if cfg.estimate_beta { truth.mle_beta(data, truth.beta, MLE_RADIUS)? } else { truth.beta };
    let fitted = truth.with_beta(beta_hat);
    let mix = fitted.mixture(cfg.estimate_beta);
    let panel = semiparam::simulate_panel(&mix, cfg.s, panel_seed)?;
    let cells = data.cells()?;
    let weights = cells.weights();
    let n = data.n();
    let method = CondMean::Enumerate;
    let eps_of = |p: f64| -> Result<f64> { Ok(epsilon_semiparam(p, n, cfg.lambda_max)?.epsilon) };
    let p_ci = cfg.p[0];
    let eps_ci = eps_of(p_ci)?;

    let target = ModelTarget(&mix);
    let ev = Evaluator::new(&mix, &panel, &target, &weights)?;
    let mut out = Vec::new();
    if cfg.has(EstimatorKind::RandomEffects) {
        let fit = delta_re(&ev, &cells)?;
        out.push(with_report("RE".into(), Quantity::Delta, &fit, bias_re(&ev, eps_ci, method)?, eps_ci, p_ci, cfg.mu)?);
    }
    if cfg.has(EstimatorKind::EmpiricalBayes) {
        let fit = delta_eb(&ev, &cells)?;
        out.push(with_report("EB".into(), Quantity::Delta, &fit, bias_eb(&ev, eps_ci, method)?, eps_ci, p_ci, cfg.mu)?);
    }
    if cfg.has(EstimatorKind::LinearProbability) {
        out.push(Estimate {
            estimator: "LP".into(),
            quantity: Quantity::Delta,
            point: linear_probability(data)?,
            bias_bound: None,
            ci_robust: None,
            ci_ak: None,
        });
    }
    if cfg.has(EstimatorKind::MinimumMse) {
        for &p in &cfg.p {
            let eps = eps_of(p)?;
            let plan = SemiparamPlan::new(&panel, &target, eps * n as f64, &weights)?;
            let fit = delta_mmse(&ev, &cells, &plan)?;
            let bias = bias_of_plan(&ev, &plan, eps, method)?;
            out.push(with_report(mmse_name(p), Quantity::Delta, &fit, bias, eps, p, cfg.mu)?);
        }
    }

    if cfg.estimate_beta && (cfg.has(EstimatorKind::MaximumLikelihood) || cfg.has(EstimatorKind::MinimumMse)) {
        let bt = ParameterTarget { value: beta_hat, index: 0, dim_eta: 1 };
        let evb = Evaluator::new(&mix, &panel, &bt, &weights)?;
        if cfg.has(EstimatorKind::MaximumLikelihood) {
            let plan = SemiparamPlan::new(&panel, &bt, 0.0, &weights)?;
            let mut fit = delta_mmse(&evb, &cells, &plan)?;
            fit.point = beta_hat;
            let bias = bias_of_plan(&evb, &plan, eps_ci, method)?;
            out.push(with_report("MLE".into(), Quantity::Beta, &fit, bias, eps_ci, p_ci, cfg.mu)?);
        }
        if cfg.has(EstimatorKind::MinimumMse) {
            for &p in &cfg.p {
                let eps = eps_of(p)?;
                let plan = SemiparamPlan::new(&panel, &bt, eps * n as f64, &weights)?;
                let fit = delta_mmse(&evb, &cells, &plan)?;
                let bias = bias_of_plan(&evb, &plan, eps, method)?;
                out.push(with_report(mmse_name(p), Quantity::Beta, &fit, bias, eps, p, cfg.mu)?);
            }
        }
    }
    Ok((beta_hat, out))
}

pub fn run_replication(cfg: &ExperimentConfig, truth: &DynProbitModel, dgp: Dgp, r: usize) -> Result<Replication> {
    let data = truth.simulate(cfg.n, dgp, derive_key(cfg.seed, &[DATA, r as u64]));
    let (beta_hat, estimates) = estimate_on(cfg, truth, &data, derive_key(cfg.seed, &[PANEL, r as u64]))?;
    Ok(Replication { index: r, data_hash: data_hash(&data), beta_hat, estimates })
}

/// Sampling summary of one estimator over the replications.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub quantity: Quantity,
    pub truth: f64,
    pub reps: usize,
    pub mean: f64,
    pub bias: f64,
    pub bias_se: f64,
    pub variance: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    pub coverage: Option<f64>,
    pub coverage_ak: Option<f64>,
    pub width_robust: Option<f64>,
    pub width_ak: Option<f64>,
    pub mean_bias_bound: Option<f64>,
}

/// Empirical quantile with linear interpolation.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(estimates: &[&Estimate], truth: f64) -> EstimatorSummary {
    let reps = estimates.len();
    let x: Vec<f64> = estimates.iter().map(|e| e.point).collect();
    let mean = linalg::mean(&x);
    let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
    let err2: Vec<f64> = x.iter().map(|v| (v - truth) * (v - truth)).collect();
    let variance = linalg::mean(&dev);
    let mut sorted = x.clone();
    sorted.sort_by(f64::total_cmp);
    let frac = |f: &dyn Fn(&Estimate) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = estimates.iter().map(|e| f(e)).collect();
        v.map(|v| linalg::mean(&v))
    };
    let cover = |ci: Option<(f64, f64)>| ci.map(|(lo, hi)| ((lo <= truth && truth <= hi) as u8) as f64);
    EstimatorSummary {
        estimator: estimates[0].estimator.clone(),
        quantity: estimates[0].quantity,
        truth,
        reps,
        mean,
        bias: mean - truth,
        bias_se: (variance * reps as f64 / (reps.max(2) - 1) as f64 / reps as f64).sqrt(),
        variance,
        mse: linalg::mean(&err2),
        mse_se: linalg::sample_sd(&err2) / (reps as f64).sqrt(),
        p2_5: quantile(&sorted, 0.025),
        p97_5: quantile(&sorted, 0.975),
        coverage: frac(&|e| cover(e.ci_robust)),
        coverage_ak: frac(&|e| cover(e.ci_ak)),
        width_robust: frac(&|e| e.ci_robust.map(|(lo, hi)| hi - lo)),
        width_ak: frac(&|e| e.ci_ak.map(|(lo, hi)| hi - lo)),
        mean_bias_bound: frac(&|e| e.bias_bound),
    }
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub truth_delta: f64,
    pub truth_beta: f64,
    pub summaries: Vec<EstimatorSummary>,
    pub replications: Vec<Replication>,
    pub failures: Vec<(usize, String)>,
    pub runtime_secs: f64,
}

impl McResult {
    pub fn summary(&self, estimator: &str, quantity: Quantity) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == estimator && s.quantity == quantity)
    }
}

fn aggregate(replications: &[Replication], truth_delta: f64, truth_beta: f64) -> Vec<EstimatorSummary> {
    let Some(first) = replications.first() else {
        return Vec::new();
    };
    first
        .estimates
        .iter()
        .enumerate()
        .map(|(i, e0)| {
            let col: Vec<&Estimate> = replications.iter().map(|r| &r.estimates[i]).collect();
            debug_assert!(col.iter().all(|e| e.estimator == e0.estimator));
            let truth = match e0.quantity {
                Quantity::Delta => truth_delta,
                Quantity::Beta => truth_beta,
            };
            summarize(&col, truth)
        })
        .collect()
}

/// Runs `cfg.r` replications at design `(t, dgp)`.
pub fn run_cell(cfg: &ExperimentConfig, t: usize, dgp: Dgp) -> Result<McResult> {
    cfg.validate()?;
    let start = Instant::now();
    let truth = cfg.model(t)?;
    let outcomes = exec::par_map(cfg.r, |r| run_replication(cfg, &truth, dgp, r));
    let mut replications = Vec::with_capacity(cfg.r);
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rep) => replications.push(rep),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > cfg.max_failure_rate * cfg.r as f64 || replications.is_empty() {
        return Err(HarnessError::TooManyFailures {
            failed: failures.len(),
            total: cfg.r,
            limit: 100.0 * cfg.max_failure_rate,
            first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }
    let truth_delta = truth.true_delta(dgp);
    Ok(McResult {
        truth_delta,
        truth_beta: truth.beta,
        summaries: aggregate(&replications, truth_delta, truth.beta),
        replications,
        failures,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// The single-design experiment described by `cfg`.
pub fn run_montecarlo(cfg: &ExperimentConfig) -> Result<McResult> {
    run_cell(cfg, cfg.t, cfg.dgp_at(cfg.nu))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(point: f64, ci: (f64, f64)) -> Estimate {
        Estimate {
            estimator: "X".into(),
            quantity: Quantity::Delta,
            point,
            bias_bound: Some(0.1),
            ci_robust: Some(ci),
            ci_ak: Some(ci),
        }
    }

    #[test]
    fn single_replication_bias_is_its_error() {
        let e = est(0.3, (0.0, 1.0));
        let s = summarize(&[&e], 0.25);
        assert!((s.bias - 0.05).abs() < 1e-15);
        assert_eq!(s.variance, 0.0);
        assert!((s.mse - 0.0025).abs() < 1e-15);
        assert_eq!(s.coverage, Some(1.0));
    }

    #[test]
    fn mse_is_bias_squared_plus_variance() {
        let es: Vec<Estimate> = (0..37).map(|i| (i as f64 * 0.37).sin()).map(|x| est(x, (x - 0.5, x + 0.5))).collect();
        let refs: Vec<&Estimate> = es.iter().collect();
        let s = summarize(&refs, 0.1);
        assert!((s.mse - (s.bias * s.bias + s.variance)).abs() < 1e-12);
        assert!(s.coverage.unwrap() > 0.0 && s.coverage.unwrap() < 1.0);
    }

    #[test]
    fn labels() {
        assert_eq!(mmse_name(0.01), "MMSE(p=0.01)");
        assert_eq!(mmse_name(1e-10), "MMSE(p=1e-10)");
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }
}
