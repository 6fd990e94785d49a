//! Linear regression with possibly endogenous covariates.
//!
//! `Y = X'beta + U`, `X = Pi Z + V`, `U = rho'V + xi`. The reference model
//! sets `rho = 0` (exogenous `X`); `theta = (beta, rho)`, `eta = beta` and
//! the target is `c'beta`. `Pi`, `Sigma_V`, `Sigma_Z` and `sigma^2` are known.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::{self, CalibrationResult};
use crate::error::{check_dim, MmseError, Result};
use crate::gmm::MomentModel;
use crate::linalg;
use crate::neighborhoods::WeightedEuclidean;
use crate::parametric::ReferenceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearObs {
    pub y: f64,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearIvModel {
    pub pi: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub sigma_z: DMatrix<f64>,
    pub sigma2: f64,
    pub c: DVector<f64>,
    sigma_x: DMatrix<f64>,
}

impl LinearIvModel {
    pub fn new(pi: DMatrix<f64>, sigma_v: DMatrix<f64>, sigma_z: DMatrix<f64>, sigma2: f64, c: DVector<f64>) -> Result<Self> {
        let (kx, kz) = pi.shape();
        check_dim("Sigma_V", kx, sigma_v.nrows())?;
        check_dim("Sigma_Z", kz, sigma_z.nrows())?;
        check_dim("c", kx, c.len())?;
        if !(sigma2 > 0.0) {
            return Err(MmseError::InvalidInput("sigma^2 must be positive".into()));
        }
        linalg::cholesky(&sigma_v, "Sigma_V")?;
        let sigma_x = linalg::symmetrize(&(&pi * &sigma_z * pi.transpose() + &sigma_v));
        linalg::cholesky(&sigma_x, "Sigma_X")?;
        Ok(Self { pi, sigma_v, sigma_z, sigma2, c, sigma_x })
    }

    pub fn dim_x(&self) -> usize {
        self.pi.nrows()
    }

    pub fn dim_z(&self) -> usize {
        self.pi.ncols()
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    /// `Sigma_V - Sigma_V Sigma_X^{-1} Sigma_V`.
    pub fn rho_block(&self) -> DMatrix<f64> {
        let sx_inv_sv = linalg::spd_solve(&self.sigma_x, &self.sigma_v, "Sigma_X").expect("Sigma_X is SPD");
        linalg::symmetrize(&(&self.sigma_v - &self.sigma_v * sx_inv_sv))
    }

    /// Population information `(1/sigma^2) [[Sigma_X, Sigma_V], [Sigma_V, Sigma_V]]`.
    pub fn information(&self) -> DMatrix<f64> {
        let k = self.dim_x();
        let mut h = DMatrix::zeros(2 * k, 2 * k);
        h.view_mut((0, 0), (k, k)).copy_from(&self.sigma_x);
        h.view_mut((0, k), (k, k)).copy_from(&self.sigma_v);
        h.view_mut((k, 0), (k, k)).copy_from(&self.sigma_v);
        h.view_mut((k, k), (k, k)).copy_from(&self.sigma_v);
        h / self.sigma2
    }

    /// Block-diagonal weight matrix `diag(Omega_beta, Omega_rho)`.
    pub fn block_omega(omega_beta: &DMatrix<f64>, omega_rho: &DMatrix<f64>) -> Result<WeightedEuclidean> {
        let k = omega_beta.nrows();
        check_dim("Omega_rho", k, omega_rho.nrows())?;
        let mut o = DMatrix::zeros(2 * k, 2 * k);
        o.view_mut((0, 0), (k, k)).copy_from(omega_beta);
        o.view_mut((k, k), (k, k)).copy_from(omega_rho);
        WeightedEuclidean::new(o)
    }

    /// Draws `(Y, X, Z)` with endogeneity `rho`.
    pub fn simulate_obs(&self, beta: &DVector<f64>, rho: &DVector<f64>, rng: &mut ChaCha8Rng) -> LinearObs {
        let lz = linalg::cholesky(&self.sigma_z, "Sigma_Z").expect("Sigma_Z is SPD").l();
        let lv = linalg::cholesky(&self.sigma_v, "Sigma_V").expect("Sigma_V is SPD").l();
        let ez = DVector::from_fn(self.dim_z(), |_, _| StandardNormal.sample(rng));
        let ev = DVector::from_fn(self.dim_x(), |_, _| StandardNormal.sample(rng));
        let xi: f64 = StandardNormal.sample(rng);
        let z = lz * ez;
        let v = lv * ev;
        let x = &self.pi * &z + &v;
        let y = x.dot(beta) + rho.dot(&v) + self.sigma2.sqrt() * xi;
        LinearObs { y, x, z }
    }
}

/// Closed-form minimum-MSE influence function. The regularizer is
/// `sigma^2 (eps n)^{-1} Omega_rho`, which is what the general formula gives
/// for this likelihood; with `sigma^2 = 1` it reduces to the textbook ridge form.
pub fn h_linear(obs: &LinearObs, beta: &DVector<f64>, model: &LinearIvModel, omega_rho: &DMatrix<f64>, eps_n: f64) -> Result<f64> {
    let r = obs.y - obs.x.dot(beta);
    let sx_inv_c = linalg::spd_solve_vec(model.sigma_x(), &model.c, "Sigma_X")?;
    let ols = r * obs.x.dot(&sx_inv_c);
    if eps_n == 0.0 {
        return Ok(ols);
    }
    let v = &obs.x - &model.pi * &obs.z;
    let sv_sx_inv = &model.sigma_v * linalg::spd_solve(model.sigma_x(), &DMatrix::identity(model.dim_x(), model.dim_x()), "Sigma_X")?;
    let dir = &v - &sv_sx_inv * &obs.x;
    let rhs = &model.sigma_v * &sx_inv_c;
    let m = model.rho_block();
    let w = if eps_n.is_infinite() {
        linalg::pinv_sym(&m, linalg::PINV_RTOL) * rhs
    } else {
        let a = &m + omega_rho * (model.sigma2 / eps_n);
        linalg::spd_solve_vec(&a, &rhs, "Sigma_V - Sigma_V Sigma_X^-1 Sigma_V + Omega_rho / (eps n)")?
    };
    Ok(ols - r * dir.dot(&w))
}

/// The `eps -> inf` limit `(y - x'beta) (Pi z)' (Pi Sigma_Z Pi')^{-1} c`.
pub fn h_linear_iv_limit(obs: &LinearObs, beta: &DVector<f64>, model: &LinearIvModel) -> Result<f64> {
    let r = obs.y - obs.x.dot(beta);
    let pz = &model.pi * &obs.z;
    let m = &model.pi * &model.sigma_z * model.pi.transpose();
    Ok(r * pz.dot(&linalg::spd_solve_vec(&m, &model.c, "Pi Sigma_Z Pi'")?))
}

/// `4 sigma^2 Phi^{-1}(p)^2 / (n lambda_max(Omega_rho^{-1/2} (Sigma_V - Sigma_V Sigma_X^{-1} Sigma_V) Omega_rho^{-1/2}))`.
pub fn epsilon_linear(p: f64, n: usize, model: &LinearIvModel, omega_rho: &DMatrix<f64>) -> Result<CalibrationResult> {
    let w = linalg::inv_sqrt_spd(omega_rho, "Omega_rho")?;
    let lam = linalg::lambda_max_sym(&(&w * model.rho_block() * &w));
    if lam <= calibration::LAMBDA_FLOOR {
        return Err(MmseError::UnboundedEpsilon { lambda_max: lam });
    }
    let r = calibration::epsilon_semiparam(p, n, lam / model.sigma2)?;
    Ok(r)
}

impl ReferenceModel for LinearIvModel {
    type Obs = LinearObs;

    fn dim_theta(&self) -> usize {
        2 * self.dim_x()
    }
    fn dim_eta(&self) -> usize {
        self.dim_x()
    }
    fn log_density(&self, o: &LinearObs, theta: &DVector<f64>) -> f64 {
        let k = self.dim_x();
        let beta = theta.rows(0, k);
        let rho = theta.rows(k, k);
        let v = &o.x - &self.pi * &o.z;
        let r = o.y - o.x.dot(&beta) - v.dot(&rho);
        -0.5 * r * r / self.sigma2 - 0.5 * (2.0 * std::f64::consts::PI * self.sigma2).ln()
    }
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        let k = self.dim_x();
        DVector::from_fn(2 * k, |i, _| if i < k { eta[i] } else { 0.0 })
    }
    fn delta(&self, theta: &DVector<f64>) -> f64 {
        theta.rows(0, self.dim_x()).dot(&self.c)
    }
    fn score_theta(&self, o: &LinearObs, theta: &DVector<f64>) -> DVector<f64> {
        let k = self.dim_x();
        let v = &o.x - &self.pi * &o.z;
        let r = o.y - o.x.dot(&theta.rows(0, k)) - v.dot(&theta.rows(k, k));
        DVector::from_fn(2 * k, |i, _| if i < k { o.x[i] } else { v[i - k] } * r / self.sigma2)
    }
    fn jacobian_eta(&self, _eta: &DVector<f64>) -> DMatrix<f64> {
        let k = self.dim_x();
        DMatrix::from_fn(k, 2 * k, |i, j| if i == j { 1.0 } else { 0.0 })
    }
    fn grad_theta_delta(&self, _theta: &DVector<f64>) -> DVector<f64> {
        let k = self.dim_x();
        DVector::from_fn(2 * k, |i, _| if i < k { self.c[i] } else { 0.0 })
    }
    fn expected_information(&self, _theta: &DVector<f64>, like: Option<&LinearObs>) -> Option<DMatrix<f64>> {
        match like {
            None => Some(self.information()),
            Some(o) => {
                let v = &o.x - &self.pi * &o.z;
                let k = self.dim_x();
                let w = DVector::from_fn(2 * k, |i, _| if i < k { o.x[i] } else { v[i - k] });
                Some(&w * w.transpose() / self.sigma2)
            }
        }
    }
    fn simulate(&self, theta: &DVector<f64>, like: Option<&LinearObs>, rng: &mut ChaCha8Rng) -> Option<LinearObs> {
        let k = self.dim_x();
        let beta = theta.rows(0, k).into_owned();
        let rho = theta.rows(k, k).into_owned();
        match like {
            None => Some(self.simulate_obs(&beta, &rho, rng)),
            Some(o) => {
                let v = &o.x - &self.pi * &o.z;
                let xi: f64 = StandardNormal.sample(rng);
                Some(LinearObs { y: o.x.dot(&beta) + v.dot(&rho) + self.sigma2.sqrt() * xi, x: o.x.clone(), z: o.z.clone() })
            }
        }
    }
}

/// Moment form with instruments `W = (X, Z)`:
/// `psi = W (Y - X'beta - rho'(X - Pi Z))`.
#[derive(Debug, Clone)]
pub struct LinearIvMoments<'a>(pub &'a LinearIvModel);

impl MomentModel for LinearIvMoments<'_> {
    type Obs = LinearObs;

    fn dim_theta(&self) -> usize {
        2 * self.0.dim_x()
    }
    fn dim_eta(&self) -> usize {
        self.0.dim_x()
    }
    fn dim_psi(&self) -> usize {
        self.0.dim_x() + self.0.dim_z()
    }
    fn psi(&self, o: &LinearObs, theta: &DVector<f64>) -> DVector<f64> {
        let k = self.0.dim_x();
        let v = &o.x - &self.0.pi * &o.z;
        let r = o.y - o.x.dot(&theta.rows(0, k)) - v.dot(&theta.rows(k, k));
        let kz = self.0.dim_z();
        DVector::from_fn(k + kz, |i, _| if i < k { o.x[i] } else { o.z[i - k] } * r)
    }
    fn jac_psi_theta(&self, o: &LinearObs, _theta: &DVector<f64>) -> DMatrix<f64> {
        let k = self.0.dim_x();
        let kz = self.0.dim_z();
        let v = &o.x - &self.0.pi * &o.z;
        let w = DVector::from_fn(k + kz, |i, _| if i < k { o.x[i] } else { o.z[i - k] });
        let d = DVector::from_fn(2 * k, |j, _| if j < k { -o.x[j] } else { -v[j - k] });
        d * w.transpose()
    }
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        self.0.theta_of_eta(eta)
    }
    fn delta(&self, theta: &DVector<f64>) -> f64 {
        ReferenceModel::delta(self.0, theta)
    }
    fn jacobian_eta(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        ReferenceModel::jacobian_eta(self.0, eta)
    }
    fn grad_theta_delta(&self, theta: &DVector<f64>) -> DVector<f64> {
        ReferenceModel::grad_theta_delta(self.0, theta)
    }
}
