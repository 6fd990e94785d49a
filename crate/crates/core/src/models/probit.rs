//! Dynamic panel probit with random effects.
//!
//! `Y_it = 1{beta Y_i,t-1 + A_i + U_it >= 0}` with `U_it ~ N(0, 1)` and
//! reference effects `A_i | Y_i0 ~ N(mu1 + mu2 Y_i0, sigma^2)`. The target is
//! the average state dependence effect `E[Phi(beta + A) - Phi(A)]`.
//!
//! Given `Y_i0` the likelihood depends on a path only through its transition
//! counts, so outcomes are stored as [`ProbitCounts`] and covariate cells are
//! the two values of `Y_i0`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MmseError, Result};
use crate::exec;
use crate::linalg;
use crate::normal;
use crate::parametric::ReferenceModel;
use crate::rng;
use crate::semiparam::{CellData, MixtureModel};

/// Transition counts `n_{prev,cur}` of a binary path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ProbitCounts {
    pub n00: u16,
    pub n01: u16,
    pub n10: u16,
    pub n11: u16,
}

impl ProbitCounts {
    pub fn periods(&self) -> usize {
        (self.n00 + self.n01 + self.n10 + self.n11) as usize
    }

    fn push(mut self, prev: u8, cur: u8) -> Self {
        match (prev, cur) {
            (0, 0) => self.n00 += 1,
            (0, 1) => self.n01 += 1,
            (1, 0) => self.n10 += 1,
            _ => self.n11 += 1,
        }
        self
    }

    /// `log g(y | a)` given `lnPhi(a), lnPhi(-a), lnPhi(beta + a), lnPhi(-beta - a)`.
    fn log_g_from(&self, l: &[f64; 4]) -> f64 {
        let term = |n: u16, v: f64| if n == 0 { 0.0 } else { n as f64 * v };
        term(self.n01, l[0]) + term(self.n00, l[1]) + term(self.n11, l[2]) + term(self.n10, l[3])
    }
}

fn check_binary(xs: &[u8]) -> Result<()> {
    match xs.iter().position(|&v| v > 1) {
        Some(i) => Err(MmseError::InvalidInput(format!("outcome {} at position {i} is not binary", xs[i]))),
        None => Ok(()),
    }
}

/// Transition counts of `y_path` (periods `1..=T`) starting from `y0`.
pub fn counts_from_path(y_path: &[u8], y0: u8) -> Result<ProbitCounts> {
    check_binary(y_path)?;
    check_binary(&[y0])?;
    let mut c = ProbitCounts::default();
    let mut prev = y0;
    for &y in y_path {
        c = c.push(prev, y);
        prev = y;
    }
    Ok(c)
}

fn ln_phis(a: f64, beta: f64) -> [f64; 4] {
    [normal::ln_cdf(a), normal::ln_cdf(-a), normal::ln_cdf(beta + a), normal::ln_cdf(-beta - a)]
}

/// `sum_t log Phi((2 y_t - 1)(beta y_{t-1} + a))`.
pub fn probit_loglik(y_path: &[u8], y0: u8, a: f64, beta: f64) -> Result<f64> {
    Ok(counts_from_path(y_path, y0)?.log_g_from(&ln_phis(a, beta)))
}

/// `Phi(beta + a) - Phi(a)`.
pub fn probit_delta(a: f64, beta: f64) -> f64 {
    normal::cdf(beta + a) - normal::cdf(a)
}

/// Distribution of the random effects in simulated data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dgp {
    /// The reference normal distribution.
    Reference,
    /// Log-normal with the reference mean and standard deviation.
    LogNormal,
    /// Normal with the mean shifted by `nu`.
    Shifted(f64),
}

impl Dgp {
    /// Twice the KL divergence from the reference, when it is closed form.
    pub fn twice_kl(&self, sigma: f64) -> Option<f64> {
        match *self {
            Dgp::Reference => Some(0.0),
            Dgp::Shifted(nu) => Some(nu * nu / (sigma * sigma)),
            Dgp::LogNormal => None,
        }
    }
}

/// Nodes and weights (summing to one) for `E f(Z)`, `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let (values, vectors) = linalg::sym_eigen(&jacobi);
    let w: Vec<f64> = (0..n).map(|k| vectors[(0, k)] * vectors[(0, k)]).collect();
    let total: f64 = w.iter().sum();
    (values.iter().copied().collect(), w.iter().map(|v| v / total).collect())
}

const GH_NODES: usize = 60;

fn gh() -> &'static (Vec<f64>, Vec<f64>) {
    static GH: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GH.get_or_init(|| gauss_hermite(GH_NODES))
}

/// Panel of binary paths; `paths[i][0]` is `Y_i0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbitData {
    pub paths: Vec<Vec<u8>>,
}

impl ProbitData {
    pub fn n(&self) -> usize {
        self.paths.len()
    }

    pub fn periods(&self) -> usize {
        self.paths.first().map_or(0, |p| p.len() - 1)
    }

    pub fn counts(&self) -> Result<Vec<(u8, ProbitCounts)>> {
        self.paths.iter().map(|p| Ok((p[0], counts_from_path(&p[1..], p[0])?))).collect()
    }

    /// Outcomes grouped by `Y_i0`.
    pub fn cells(&self) -> Result<CellData<ProbitCounts>> {
        let mut cells = vec![Vec::new(), Vec::new()];
        for (y0, c) in self.counts()? {
            cells[y0 as usize].push(c);
        }
        Ok(CellData { cells })
    }
}

/// Linear probability benchmark: within-individual OLS slope of `y_t` on `y_{t-1}`.
pub fn linear_probability(data: &ProbitData) -> Result<f64> {
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for p in &data.paths {
        check_binary(p)?;
        let t = p.len() - 1;
        if t < 2 {
            continue;
        }
        let x: Vec<f64> = p[..t].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = p[1..].iter().map(|&v| v as f64).collect();
        let mx = linalg::mean(&x);
        let my = linalg::mean(&y);
        for (xi, yi) in x.iter().zip(&y) {
            sxy += (xi - mx) * (yi - my);
            sxx += (xi - mx) * (xi - mx);
        }
    }
    if sxx == 0.0 {
        return Err(MmseError::Singular("no within-individual variation in y_{t-1}".into()));
    }
    Ok(sxy / sxx)
}

/// The dynamic probit with reference effects `N(mu1 + mu2 y0, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynProbitModel {
    pub beta: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub t: usize,
}

impl DynProbitModel {
    pub fn new(beta: f64, mu1: f64, mu2: f64, sigma: f64, t: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(MmseError::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        if t == 0 || t > u16::MAX as usize {
            return Err(MmseError::InvalidInput(format!("T must be >= 1, got {t}")));
        }
        Ok(Self { beta, mu1, mu2, sigma, t })
    }

    pub fn mean_effect(&self, y0: u8) -> f64 {
        self.mu1 + self.mu2 * y0 as f64
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..*self }
    }

    fn draw_effect(&self, y0: u8, dgp: Dgp, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        let m = self.mean_effect(y0);
        match dgp {
            Dgp::Reference => m + self.sigma * z,
            Dgp::Shifted(nu) => m + nu + self.sigma * z,
            Dgp::LogNormal => m + self.sigma * lognormal_standardized(z),
        }
    }

    fn draw_path(&self, y0: u8, a: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut path = Vec::with_capacity(self.t + 1);
        path.push(y0);
        let mut prev = y0;
        for _ in 0..self.t {
            let u: f64 = StandardNormal.sample(rng);
            let y = (self.beta * prev as f64 + a + u >= 0.0) as u8;
            path.push(y);
            prev = y;
        }
        path
    }

    /// `n` individuals with `Y_i0 ~ Bernoulli(1/2)`. Individual `i` uses its
    /// own substream, so the data do not depend on the thread count.
    pub fn simulate(&self, n: usize, dgp: Dgp, seed: u64) -> ProbitData {
        let paths = exec::par_map(n, |i| {
            let mut r = rng::stream(seed, &[0x5052_4f42, i as u64]);
            let y0 = r.random_bool(0.5) as u8;
            let a = self.draw_effect(y0, dgp, &mut r);
            self.draw_path(y0, a, &mut r)
        });
        ProbitData { paths }
    }

    /// `E[Phi(beta + A) - Phi(A)]` under `dgp`, with `Y_0 ~ Bernoulli(1/2)`.
    pub fn true_delta(&self, dgp: Dgp) -> f64 {
        let (x, w) = gh();
        let mut total = 0.0;
        for y0 in [0u8, 1] {
            let m = self.mean_effect(y0);
            let v: f64 = x
                .iter()
                .zip(w)
                .map(|(&z, &wk)| {
                    let a = match dgp {
                        Dgp::Reference => m + self.sigma * z,
                        Dgp::Shifted(nu) => m + nu + self.sigma * z,
                        Dgp::LogNormal => m + self.sigma * lognormal_standardized(z),
                    };
                    wk * probit_delta(a, self.beta)
                })
                .sum();
            total += 0.5 * v;
        }
        total
    }

    /// Reference log-likelihood of one individual, integrating over `A` by
    /// Gauss-Hermite quadrature.
    pub fn loglik_one(&self, y0: u8, c: &ProbitCounts, beta: f64) -> f64 {
        let (x, w) = gh();
        let m = self.mean_effect(y0);
        let terms: Vec<f64> = x.iter().map(|&z| c.log_g_from(&ln_phis(m + self.sigma * z, beta))).collect();
        let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().zip(w).map(|(t, wk)| wk * (t - mx).exp()).sum::<f64>().ln()
    }

    /// Mean log-likelihood of `beta` with `(mu, sigma)` fixed at the model's values.
    pub fn loglik(&self, data: &[(u8, ProbitCounts)], beta: f64) -> f64 {
        let mut groups: BTreeMap<(u8, ProbitCounts), f64> = BTreeMap::new();
        for &k in data {
            *groups.entry(k).or_insert(0.0) += 1.0;
        }
        let keys: Vec<_> = groups.into_iter().collect();
        let vals = exec::par_map(keys.len(), |i| {
            let ((y0, c), m) = keys[i];
            m * self.loglik_one(y0, &c, beta)
        });
        linalg::pairwise_sum(&vals) / data.len() as f64
    }

    /// Maximum likelihood for `beta` by golden-section search on
    /// `[start - radius, start + radius]`.
    pub fn mle_beta(&self, data: &ProbitData, start: f64, radius: f64) -> Result<f64> {
        let counts = data.counts()?;
        let f = |b: f64| -self.loglik(&counts, b);
        golden_section(f, start - radius, start + radius, 1e-10)
    }

    pub fn mixture(&self, estimate_beta: bool) -> ProbitMixture {
        ProbitMixture { model: *self, estimate_beta, support: [OnceLock::new(), OnceLock::new()] }
    }
}

/// `(exp(Z) - e^{1/2}) / sqrt((e - 1) e)`: a log-normal variable with mean 0
/// and variance 1.
pub fn lognormal_standardized(z: f64) -> f64 {
    let e = std::f64::consts::E;
    (z.exp() - e.sqrt()) / ((e - 1.0) * e).sqrt()
}

/// Minimizes a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < tol {
            let x = 0.5 * (a + b);
            if !x.is_finite() || !fc.is_finite() {
                break;
            }
            return Ok(x);
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    Err(MmseError::NonConvergence("golden-section search".into()))
}

/// The probit as a mixture model; `beta` is the only estimated reference
/// parameter when `estimate_beta` is set.
#[derive(Debug)]
pub struct ProbitMixture {
    pub model: DynProbitModel,
    pub estimate_beta: bool,
    support: [OnceLock<Vec<(ProbitCounts, f64)>>; 2],
}

impl Clone for ProbitMixture {
    fn clone(&self) -> Self {
        self.model.mixture(self.estimate_beta)
    }
}

/// Distinct count vectors reachable from `y0` in `t` periods, with the number
/// of paths producing each.
pub fn count_support(y0: u8, t: usize) -> Vec<(ProbitCounts, f64)> {
    let mut states: BTreeMap<(u8, ProbitCounts), f64> = BTreeMap::new();
    states.insert((y0, ProbitCounts::default()), 1.0);
    for _ in 0..t {
        let mut next = BTreeMap::new();
        for ((last, c), m) in states {
            for y in [0u8, 1] {
                *next.entry((y, c.push(last, y))).or_insert(0.0) += m;
            }
        }
        states = next;
    }
    let mut out: BTreeMap<ProbitCounts, f64> = BTreeMap::new();
    for ((_, c), m) in states {
        *out.entry(c).or_insert(0.0) += m;
    }
    out.into_iter().collect()
}

impl ProbitMixture {
    fn support(&self, cell: usize) -> &[(ProbitCounts, f64)] {
        self.support[cell].get_or_init(|| count_support(cell as u8, self.model.t))
    }
}

impl MixtureModel for ProbitMixture {
    type Outcome = ProbitCounts;

    fn n_cells(&self) -> usize {
        2
    }
    fn dim_eta(&self) -> usize {
        self.estimate_beta as usize
    }
    fn sample_latent(&self, cell: usize, rng: &mut ChaCha8Rng) -> f64 {
        self.model.draw_effect(cell as u8, Dgp::Reference, rng)
    }
    fn sample_outcome(&self, cell: usize, a: f64, rng: &mut ChaCha8Rng) -> ProbitCounts {
        let p = self.model.draw_path(cell as u8, a, rng);
        counts_from_path(&p[1..], p[0]).expect("simulated paths are binary")
    }
    fn log_g(&self, _cell: usize, y: &ProbitCounts, a: f64) -> f64 {
        y.log_g_from(&ln_phis(a, self.model.beta))
    }
    fn log_g_matrix(&self, _cell: usize, ys: &[ProbitCounts], a: &[f64]) -> DMatrix<f64> {
        let l: Vec<[f64; 4]> = exec::par_map(a.len(), |k| ln_phis(a[k], self.model.beta));
        let cols = exec::par_map(a.len(), |k| ys.iter().map(|y| y.log_g_from(&l[k])).collect::<Vec<_>>());
        DMatrix::from_fn(ys.len(), a.len(), |j, k| cols[k][j])
    }
    fn outcome_score_eta(&self, _cell: usize, y: &ProbitCounts, a: f64) -> DVector<f64> {
        if !self.estimate_beta {
            return DVector::zeros(0);
        }
        let x = self.model.beta + a;
        DVector::from_element(1, y.n11 as f64 * normal::mills(x) - y.n10 as f64 * normal::mills(-x))
    }
    fn delta_integrand(&self, _cell: usize, a: f64) -> f64 {
        probit_delta(a, self.model.beta)
    }
    fn grad_eta_delta_integrand(&self, _cell: usize, a: f64) -> DVector<f64> {
        if !self.estimate_beta {
            return DVector::zeros(0);
        }
        DVector::from_element(1, normal::pdf(self.model.beta + a))
    }
    fn enumerate_outcomes(&self, cell: usize, a: f64) -> Option<Vec<(ProbitCounts, f64)>> {
        let l = ln_phis(a, self.model.beta);
        Some(self.support(cell).iter().map(|&(c, m)| (c, m * c.log_g_from(&l).exp())).collect())
    }
}

/// Fully parametric reference model with `theta = eta = (beta, mu1, mu2, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbitReference {
    pub t: usize,
}

impl ReferenceModel for ProbitReference {
    type Obs = (u8, ProbitCounts);

    fn dim_theta(&self) -> usize {
        4
    }
    fn dim_eta(&self) -> usize {
        4
    }
    fn log_density(&self, y: &Self::Obs, theta: &DVector<f64>) -> f64 {
        match DynProbitModel::new(theta[0], theta[1], theta[2], theta[3], self.t) {
            Ok(m) => m.loglik_one(y.0, &y.1, theta[0]),
            Err(_) => f64::NEG_INFINITY,
        }
    }
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        eta.clone()
    }
    fn delta(&self, theta: &DVector<f64>) -> f64 {
        DynProbitModel { beta: theta[0], mu1: theta[1], mu2: theta[2], sigma: theta[3], t: self.t }.true_delta(Dgp::Reference)
    }
    fn jacobian_eta(&self, _eta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(4, 4)
    }
    fn simulate(&self, theta: &DVector<f64>, like: Option<&Self::Obs>, rng: &mut ChaCha8Rng) -> Option<Self::Obs> {
        let m = DynProbitModel::new(theta[0], theta[1], theta[2], theta[3], self.t).ok()?;
        let y0 = match like {
            Some(o) => o.0,
            None => rng.random_bool(0.5) as u8,
        };
        let a = m.draw_effect(y0, Dgp::Reference, rng);
        let p = m.draw_path(y0, a, rng);
        Some((y0, counts_from_path(&p[1..], y0).ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglik_examples() {
        assert!((probit_loglik(&[1], 0, 0.0, 0.0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((probit_loglik(&[0], 1, 0.0, 0.0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(probit_loglik(&[2], 0, 0.0, 0.0).is_err());
        let direct: f64 = [(1u8, 0u8), (1, 1), (0, 1)]
            .iter()
            .map(|&(y, prev)| normal::cdf((2.0 * y as f64 - 1.0) * (0.7 * prev as f64 - 0.2)).ln())
            .sum();
        assert!((probit_loglik(&[1, 1, 0], 0, -0.2, 0.7).unwrap() - direct).abs() < 1e-13);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(probit_delta(0.3, 0.0), 0.0);
        assert!((probit_delta(0.0, 0.5) - 0.191_462_461_274_013_1).abs() < 1e-12);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(20);
        let m = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn support_multiplicities_sum_to_paths() {
        for t in 1..8 {
            for y0 in [0, 1] {
                let s = count_support(y0, t);
                let total: f64 = s.iter().map(|(_, m)| m).sum();
                assert_eq!(total, 2f64.powi(t as i32));
            }
        }
        let model = DynProbitModel::new(0.5, -0.25, 0.5, 0.8, 6).unwrap().mixture(false);
        let probs = model.enumerate_outcomes(1, 0.3).unwrap();
        assert!((probs.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lognormal_is_standardized() {
        let (x, w) = gauss_hermite(GH_NODES);
        let m1: f64 = x.iter().zip(&w).map(|(&z, w)| w * lognormal_standardized(z)).sum();
        let m2: f64 = x.iter().zip(&w).map(|(&z, w)| w * lognormal_standardized(z).powi(2)).sum();
        assert!(m1.abs() < 1e-10 && (m2 - 1.0).abs() < 1e-6, "{m1} {m2}");
    }

    #[test]
    fn beta_score_matches_finite_difference() {
        let m = DynProbitModel::new(0.5, -0.25, 0.5, 0.8, 5).unwrap();
        let mix = m.mixture(true);
        let c = counts_from_path(&[1, 1, 0, 1, 1], 0).unwrap();
        let a = -0.4;
        let h = 1e-6;
        let fd = (mix.model.with_beta(0.5 + h).mixture(true).log_g(0, &c, a)
            - mix.model.with_beta(0.5 - h).mixture(true).log_g(0, &c, a))
            / (2.0 * h);
        assert!((mix.outcome_score_eta(0, &c, a)[0] - fd).abs() < 1e-7);
    }

    #[test]
    fn simulation_is_reproducible_and_lp_is_finite() {
        let m = DynProbitModel::new(0.5, -0.25, 0.5, 0.8, 5).unwrap();
        let d1 = m.simulate(200, Dgp::LogNormal, 3);
        assert_eq!(d1, m.simulate(200, Dgp::LogNormal, 3));
        assert_eq!(m.simulate(50, Dgp::Shifted(0.0), 9), m.simulate(50, Dgp::Reference, 9));
        assert!(linear_probability(&d1).unwrap().is_finite());
    }

    #[test]
    fn mle_recovers_beta() {
        let m = DynProbitModel::new(0.5, -0.25, 0.5, 0.8, 5).unwrap();
        let data = m.simulate(20_000, Dgp::Reference, 11);
        let b = m.mle_beta(&data, 0.5, 2.0).unwrap();
        assert!((b - 0.5).abs() < 0.05, "{b}");
    }
}
