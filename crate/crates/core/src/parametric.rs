//! Minimum-MSE influence functions for finite-dimensional likelihood models.
//!
//! For a reference model `theta(eta)` the minimum-MSE influence function is
//! linear in the theta-score, `h(y) = s_theta(y)' coef`. The coefficient
//! interpolates between the efficient one-step adjustment of the reference
//! model (`eps = 0`) and the one-step adjustment of the large model
//! (`eps -> inf`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, MmseError, Result};
use crate::exec;
use crate::inference::EstimateReport;
use crate::linalg::{self, PINV_RTOL};
use crate::neighborhoods::{dual_norm_euclidean, NeighborhoodSpec, WeightedEuclidean};
use crate::numdiff;
use crate::rng;

/// Model plug-in: log-density, reference manifold and target functional.
///
/// Only `log_density`, `theta_of_eta` and `delta` are required; derivatives
/// fall back to central finite differences.
pub trait ReferenceModel: Sync {
    type Obs: Clone + Send + Sync;

    fn dim_theta(&self) -> usize;
    fn dim_eta(&self) -> usize;

    /// `log f_theta(y)` (conditional on any covariates carried by `y`).
    fn log_density(&self, y: &Self::Obs, theta: &DVector<f64>) -> f64;
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64>;
    fn delta(&self, theta: &DVector<f64>) -> f64;

    fn score_theta(&self, y: &Self::Obs, theta: &DVector<f64>) -> DVector<f64> {
        numdiff::gradient(|t| self.log_density(y, t), theta)
    }

    /// `G_eta`, the `dim_eta x dim_theta` transpose Jacobian of `theta(eta)`.
    fn jacobian_eta(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        numdiff::jacobian(|e| self.theta_of_eta(e), eta, self.dim_theta()).transpose()
    }

    fn grad_theta_delta(&self, theta: &DVector<f64>) -> DVector<f64> {
        numdiff::gradient(|t| self.delta(t), theta)
    }

    /// Expected information `E[s s']` at `theta`, conditional on the
    /// covariates carried by `like` when given. `None` if not available
    /// in closed form.
    fn expected_information(&self, _theta: &DVector<f64>, _like: Option<&Self::Obs>) -> Option<DMatrix<f64>> {
        None
    }

    /// Draws an observation from `f_theta`, keeping the covariates of `like`
    /// when given. `None` if the model has no sampler.
    fn simulate(&self, _theta: &DVector<f64>, _like: Option<&Self::Obs>, _rng: &mut ChaCha8Rng) -> Option<Self::Obs> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct BundleOptions {
    /// Draws for Monte Carlo expectations when no closed form exists.
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self { mc_draws: 100_000, seed: 0 }
    }
}

/// Scores, Hessians and target gradients at `theta(eta)`.
#[derive(Debug, Clone)]
pub struct ScoreHessianBundle {
    pub eta: DVector<f64>,
    pub theta: DVector<f64>,
    pub delta: f64,
    pub h_theta: DMatrix<f64>,
    pub h_eta: DMatrix<f64>,
    /// `dim_eta x dim_theta`.
    pub g_eta: DMatrix<f64>,
    pub grad_theta_delta: DVector<f64>,
    pub grad_eta_delta: DVector<f64>,
    pub scores: Option<Vec<DVector<f64>>>,
}

impl ScoreHessianBundle {
    /// Assembles a bundle from known pieces; `H_eta` and `grad_eta_delta`
    /// follow from the chain rule.
    pub fn from_parts(
        eta: DVector<f64>,
        theta: DVector<f64>,
        delta: f64,
        h_theta: DMatrix<f64>,
        g_eta: DMatrix<f64>,
        grad_theta_delta: DVector<f64>,
    ) -> Result<Self> {
        let k = theta.len();
        check_dim("H_theta rows", k, h_theta.nrows())?;
        check_dim("H_theta cols", k, h_theta.ncols())?;
        check_dim("G_eta rows", eta.len(), g_eta.nrows())?;
        check_dim("G_eta cols", k, g_eta.ncols())?;
        check_dim("grad_theta_delta", k, grad_theta_delta.len())?;
        if h_theta.iter().any(|v| !v.is_finite()) {
            return Err(MmseError::InvalidInput("H_theta has non-finite entries".into()));
        }
        let h_theta = linalg::symmetrize(&h_theta);
        let h_eta = linalg::symmetrize(&(&g_eta * &h_theta * g_eta.transpose()));
        linalg::check_condition(&h_eta, "H_eta")?;
        let grad_eta_delta = &g_eta * &grad_theta_delta;
        Ok(Self {
            eta,
            theta,
            delta,
            h_theta,
            h_eta,
            g_eta,
            grad_theta_delta,
            grad_eta_delta,
            scores: None,
        })
    }

    pub fn dim_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn dim_eta(&self) -> usize {
        self.eta.len()
    }
}

/// Averages bundles that share `theta(eta)` but differ in covariates.
pub fn average_bundles(bundles: &[ScoreHessianBundle], weights: &[f64]) -> Result<ScoreHessianBundle> {
    if bundles.is_empty() {
        return Err(MmseError::InvalidInput("no covariate bundles".into()));
    }
    check_dim("bundle weights", bundles.len(), weights.len())?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(MmseError::InvalidInput("bundle weights must be positive".into()));
    }
    let first = &bundles[0];
    let mut h = DMatrix::zeros(first.dim_theta(), first.dim_theta());
    for (b, w) in bundles.iter().zip(weights) {
        check_dim("bundle dim", first.dim_theta(), b.dim_theta())?;
        h += &b.h_theta * (*w / total);
    }
    ScoreHessianBundle::from_parts(
        first.eta.clone(),
        first.theta.clone(),
        first.delta,
        h,
        first.g_eta.clone(),
        first.grad_theta_delta.clone(),
    )
}

const MC_CHUNK: usize = 1024;

fn mc_information<M: ReferenceModel>(
    model: &M,
    theta: &DVector<f64>,
    data: Option<&[M::Obs]>,
    opts: &BundleOptions,
) -> Option<Result<DMatrix<f64>>> {
    let k = theta.len();
    let mut probe = rng::stream(opts.seed, &[u64::MAX]);
    model.simulate(theta, data.and_then(|d| d.first()), &mut probe)?;
    let draws = opts.mc_draws.max(1);
    let chunks = draws.div_ceil(MC_CHUNK);
    let partial = exec::par_map(chunks, |c| {
        let mut r = rng::stream(opts.seed, &[0x4d43, c as u64]);
        let mut acc = DMatrix::zeros(k, k);
        let lo = c * MC_CHUNK;
        let hi = (lo + MC_CHUNK).min(draws);
        for i in lo..hi {
            let like = data.map(|d| &d[if d.len() == 1 { 0 } else { r.random_range(0..d.len()) }]);
            let _ = i;
            if let Some(y) = model.simulate(theta, like, &mut r) {
                let s = model.score_theta(&y, theta);
                acc += &s * s.transpose();
            }
        }
        acc
    });
    let mut h = DMatrix::zeros(k, k);
    for p in partial {
        h += p;
    }
    Some(Ok(h / draws as f64))
}

/// Builds the score/Hessian bundle at `theta(eta)`.
///
/// `H_theta` is taken, in order of preference, from the model's closed-form
/// information (averaged over the covariates in `data` when given), from a
/// Monte Carlo average of outer products of simulated scores, or from the
/// outer product of the scores of `data`.
pub fn compute_bundle<M: ReferenceModel>(
    model: &M,
    eta: &DVector<f64>,
    data: Option<&[M::Obs]>,
    opts: &BundleOptions,
) -> Result<ScoreHessianBundle> {
    check_dim("eta", model.dim_eta(), eta.len())?;
    if model.dim_eta() > model.dim_theta() {
        return Err(MmseError::InvalidInput("dim eta exceeds dim theta".into()));
    }
    let theta = model.theta_of_eta(eta);
    check_dim("theta(eta)", model.dim_theta(), theta.len())?;
    let g = if model.dim_eta() == 0 {
        DMatrix::zeros(0, model.dim_theta())
    } else {
        model.jacobian_eta(eta)
    };
    let h_theta = match data {
        Some(d) if !d.is_empty() => {
            let infos: Vec<Option<DMatrix<f64>>> =
                exec::par_map(d.len(), |i| model.expected_information(&theta, Some(&d[i])));
            if infos.iter().all(Option::is_some) {
                let mut h = DMatrix::zeros(theta.len(), theta.len());
                for m in infos.into_iter().flatten() {
                    h += m;
                }
                h / d.len() as f64
            } else if let Some(h) = mc_information(model, &theta, Some(d), opts) {
                h?
            } else {
                let scores = exec::par_map(d.len(), |i| model.score_theta(&d[i], &theta));
                let mut h = DMatrix::zeros(theta.len(), theta.len());
                for s in &scores {
                    h += s * s.transpose();
                }
                h / d.len() as f64
            }
        }
        _ => match model.expected_information(&theta, None) {
            Some(h) => h,
            None => mc_information(model, &theta, None, opts).ok_or_else(|| {
                MmseError::InvalidInput(
                    "model provides neither expected information, a sampler, nor data".into(),
                )
            })??,
        },
    };
    let delta = model.delta(&theta);
    let grad = model.grad_theta_delta(&theta);
    let mut bundle = ScoreHessianBundle::from_parts(eta.clone(), theta.clone(), delta, h_theta, g, grad)?;
    if let Some(d) = data {
        bundle.scores = Some(exec::par_map(d.len(), |i| model.score_theta(&d[i], &theta)));
    }
    Ok(bundle)
}

/// Projection of the theta-directions orthogonal to the reference manifold.
#[derive(Debug, Clone)]
pub struct ProjectedBundle {
    pub h_tilde: DMatrix<f64>,
    pub grad_tilde_delta: DVector<f64>,
    /// `H_eta^{-1} G H_theta`, reused by the plan.
    hinv_g_htheta: DMatrix<f64>,
    /// `H_eta^{-1} grad_eta_delta`.
    hinv_grad_eta: DVector<f64>,
}

pub fn project(bundle: &ScoreHessianBundle) -> Result<ProjectedBundle> {
    let k = bundle.dim_theta();
    if bundle.dim_eta() == 0 {
        return Ok(ProjectedBundle {
            h_tilde: bundle.h_theta.clone(),
            grad_tilde_delta: bundle.grad_theta_delta.clone(),
            hinv_g_htheta: DMatrix::zeros(0, k),
            hinv_grad_eta: DVector::zeros(0),
        });
    }
    let g_h = &bundle.g_eta * &bundle.h_theta;
    let hinv_g_htheta = linalg::spd_solve(&bundle.h_eta, &g_h, "H_eta")?;
    let hinv_grad_eta = linalg::spd_solve_vec(&bundle.h_eta, &bundle.grad_eta_delta, "H_eta")?;
    let h_tilde = linalg::symmetrize(&(&bundle.h_theta - g_h.transpose() * &hinv_g_htheta));
    let grad_tilde_delta =
        &bundle.grad_theta_delta - &bundle.h_theta * bundle.g_eta.transpose() * &hinv_grad_eta;
    Ok(ProjectedBundle {
        h_tilde,
        grad_tilde_delta,
        hinv_g_htheta,
        hinv_grad_eta,
    })
}

/// Default weight matrix: `diag(H_tilde_jj)`, zero entries replaced by the
/// mean positive entry.
pub fn default_omega(projected: &ProjectedBundle) -> Result<WeightedEuclidean> {
    let d: Vec<f64> = projected.h_tilde.diagonal().iter().map(|v| v.max(0.0)).collect();
    let positive: Vec<f64> = d.iter().copied().filter(|&v| v > 1e-14 * d.iter().cloned().fold(0.0, f64::max)).collect();
    if positive.is_empty() {
        return Err(MmseError::InvalidInput("H_tilde has no positive diagonal entry".into()));
    }
    let fill = positive.iter().sum::<f64>() / positive.len() as f64;
    let w: Vec<f64> = d
        .iter()
        .map(|&v| if positive.contains(&v) { v } else { fill })
        .collect();
    WeightedEuclidean::diagonal(&w)
}

/// `[H_tilde + (eps n)^{-1} Omega]^{-1} grad_tilde` (pseudo-inverse at `eps n = inf`).
fn regularized_direction(projected: &ProjectedBundle, omega: &WeightedEuclidean, eps_n: f64) -> Result<DVector<f64>> {
    let w_half = linalg::inv_sqrt_spd(omega.omega(), "omega")?;
    let l = &w_half * &projected.h_tilde * &w_half;
    let (lam, v) = linalg::sym_eigen(&l);
    let lmax = lam.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let cutoff = PINV_RTOL * lmax;
    let scale = DVector::from_iterator(
        lam.len(),
        lam.iter().map(|&l| {
            let l = l.max(0.0);
            if eps_n.is_infinite() {
                if l > cutoff && l > 0.0 { 1.0 / l } else { 0.0 }
            } else {
                eps_n / (eps_n * l + 1.0)
            }
        }),
    );
    let rhs = v.transpose() * (&w_half * &projected.grad_tilde_delta);
    Ok(&w_half * (&v * rhs.component_mul(&scale)))
}

/// The minimum-MSE adjustment as a coefficient on the theta-score.
#[derive(Debug, Clone)]
pub struct ParametricPlan {
    pub coef: DVector<f64>,
    pub epsilon: f64,
    pub eps_n: f64,
    /// `Var(h)` under the reference model.
    pub variance: f64,
    /// Worst-case bias `b_eps(h)`.
    pub bias: f64,
    /// Reference mean of `h`; zero by construction.
    pub mean: f64,
}

impl ParametricPlan {
    pub fn new(bundle: &ScoreHessianBundle, projected: &ProjectedBundle, spec: &NeighborhoodSpec) -> Result<Self> {
        let omega = spec.omega()?;
        check_dim("omega", bundle.dim_theta(), omega.dim())?;
        let k = bundle.dim_theta();
        let mut coef = if bundle.dim_eta() == 0 {
            DVector::zeros(k)
        } else {
            bundle.g_eta.transpose() * &projected.hinv_grad_eta
        };
        let eps_n = spec.eps_n();
        if spec.epsilon > 0.0 {
            let w = regularized_direction(projected, omega, eps_n)?;
            let proj_w = if bundle.dim_eta() == 0 {
                w
            } else {
                &w - bundle.g_eta.transpose() * (&projected.hinv_g_htheta * &w)
            };
            coef += proj_w;
        }
        Self::from_coef(coef, bundle, omega, spec.epsilon, spec.n)
    }

    /// Plan for an arbitrary score-linear `h(y) = s(y)' coef`.
    pub fn from_coef(
        coef: DVector<f64>,
        bundle: &ScoreHessianBundle,
        omega: &WeightedEuclidean,
        epsilon: f64,
        n: usize,
    ) -> Result<Self> {
        check_dim("coef", bundle.dim_theta(), coef.len())?;
        let cross = &bundle.h_theta * &coef;
        let variance = coef.dot(&cross).max(0.0);
        let norm = dual_norm_euclidean(&(&bundle.grad_theta_delta - &cross), omega)?;
        let bias = if epsilon.is_infinite() {
            if norm <= 1e-12 { 0.0 } else { f64::INFINITY }
        } else {
            epsilon.sqrt() * norm
        };
        Ok(Self {
            coef,
            epsilon,
            eps_n: epsilon * n as f64,
            variance,
            bias,
            mean: 0.0,
        })
    }

    pub fn h_from_score(&self, score: &DVector<f64>) -> f64 {
        score.dot(&self.coef)
    }

    pub fn h<M: ReferenceModel>(&self, model: &M, y: &M::Obs, theta: &DVector<f64>) -> f64 {
        self.h_from_score(&model.score_theta(y, theta))
    }

    /// `b^2 + Var(h) / n`.
    pub fn mse(&self, n: usize) -> f64 {
        self.bias * self.bias + self.variance / n as f64
    }
}

/// Minimum-MSE influence value at `y`.
pub fn h_mmse<M: ReferenceModel>(
    model: &M,
    y: &M::Obs,
    bundle: &ScoreHessianBundle,
    projected: &ProjectedBundle,
    spec: &NeighborhoodSpec,
) -> Result<f64> {
    let plan = ParametricPlan::new(bundle, projected, spec)?;
    Ok(plan.h(model, y, &bundle.theta))
}

/// Covariate version: the Hessians are averages over the covariate sample.
pub fn h_mmse_conditional<M: ReferenceModel>(
    model: &M,
    y: &M::Obs,
    averaged: &ScoreHessianBundle,
    spec: &NeighborhoodSpec,
) -> Result<f64> {
    let projected = project(averaged)?;
    h_mmse(model, y, averaged, &projected, spec)
}

/// Mean log-likelihood and its eta-gradient.
fn mean_loglik<M: ReferenceModel>(model: &M, data: &[M::Obs], eta: &DVector<f64>) -> (f64, DVector<f64>) {
    let theta = model.theta_of_eta(eta);
    let g = model.jacobian_eta(eta);
    let parts = exec::par_map(data.len(), |i| {
        (model.log_density(&data[i], &theta), &g * model.score_theta(&data[i], &theta))
    });
    let ll: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let mut grad = DVector::zeros(eta.len());
    for p in &parts {
        grad += &p.1;
    }
    (linalg::mean(&ll), grad / data.len() as f64)
}

/// Reference-model MLE of `eta` by BFGS with Armijo backtracking.
pub fn fit_mle<M: ReferenceModel>(model: &M, data: &[M::Obs], start: &DVector<f64>) -> Result<DVector<f64>> {
    const MAX_ITER: usize = 500;
    const GTOL: f64 = 1e-6;
    if data.is_empty() {
        return Err(MmseError::InvalidInput("empty data".into()));
    }
    check_dim("mle start", model.dim_eta(), start.len())?;
    let k = start.len();
    if k == 0 {
        return Ok(start.clone());
    }
    let mut x = start.clone();
    let (mut f, mut g) = mean_loglik(model, data, &x);
    if !f.is_finite() {
        return Err(MmseError::InvalidInput("log-likelihood not finite at start".into()));
    }
    let mut hinv = DMatrix::identity(k, k);
    for _ in 0..MAX_ITER {
        if g.norm() <= GTOL {
            return Ok(x);
        }
        // Ascent direction for the log-likelihood.
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(k, k);
            dir = g.clone();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            let (fc, gc) = mean_loglik(model, data, &cand);
            if fc.is_finite() && fc >= f + 1e-4 * step * dir.dot(&g) {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if g.norm() <= 1e3 * GTOL {
                return Ok(x);
            }
            return Err(MmseError::NonConvergence(format!("line search failed, |grad| = {:e}", g.norm())));
        };
        let s = &xn - &x;
        // Maximizing f is minimizing -f, whose gradient change is -(gnew - g).
        let yv = -(&gnew - &g);
        let sy = s.dot(&yv);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(k, k);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        x = xn;
        f = fnew;
        g = gnew;
    }
    if g.norm() <= GTOL {
        Ok(x)
    } else {
        Err(MmseError::NonConvergence(format!("MLE gradient norm {:e} after {MAX_ITER} iterations", g.norm())))
    }
}

/// How the preliminary estimate of `eta` is obtained.
#[derive(Debug, Clone)]
pub enum EtaChoice {
    Given(DVector<f64>),
    FitMle { start: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub mu: f64,
    pub p: Option<f64>,
    pub bundle: BundleOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { mu: 0.05, p: None, bundle: BundleOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ParametricFit {
    pub report: EstimateReport,
    pub eta_hat: DVector<f64>,
    pub plan: ParametricPlan,
    pub h_values: Vec<f64>,
}

/// One-step minimum-MSE estimate `delta(theta(eta_hat)) + mean h(Y_i)`.
pub fn estimate<M: ReferenceModel>(
    model: &M,
    data: &[M::Obs],
    spec: &NeighborhoodSpec,
    eta: &EtaChoice,
    opts: &EstimateOptions,
) -> Result<ParametricFit> {
    if data.is_empty() {
        return Err(MmseError::InvalidInput("empty data".into()));
    }
    let eta_hat = match eta {
        EtaChoice::Given(e) => e.clone(),
        EtaChoice::FitMle { start } => fit_mle(model, data, start)?,
    };
    let bundle = compute_bundle(model, &eta_hat, Some(data), &opts.bundle)?;
    let projected = project(&bundle)?;
    let plan = ParametricPlan::new(&bundle, &projected, spec)?;
    let scores = bundle.scores.as_ref().expect("scores computed with data");
    let h_values: Vec<f64> = scores.iter().map(|s| plan.h_from_score(s)).collect();
    let point = bundle.delta + linalg::mean(&h_values);
    let sd = linalg::sample_sd(&h_values);
    let report = EstimateReport::new("MMSE", point, plan.bias, sd, data.len(), spec.epsilon, opts.p, opts.mu)?;
    Ok(ParametricFit { report, eta_hat, plan, h_values })
}
