//! Minimum-MSE adjustments for models defined by moment restrictions.
//!
//! Conventions: `K_theta` is `dim_theta x dim_psi` with `(j, k)` element
//! `E d psi_k / d theta_j`, and `K_eta = G_eta K_theta`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, MmseError, Result};
use crate::exec;
use crate::inference::EstimateReport;
use crate::linalg::{self, PINV_RTOL};
use crate::neighborhoods::{dual_norm_euclidean, NeighborhoodSpec, WeightedEuclidean};
use crate::numdiff;

pub trait MomentModel: Sync {
    type Obs: Clone + Send + Sync;

    fn dim_theta(&self) -> usize;
    fn dim_eta(&self) -> usize;
    fn dim_psi(&self) -> usize;

    fn psi(&self, y: &Self::Obs, theta: &DVector<f64>) -> DVector<f64>;
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64>;
    fn delta(&self, theta: &DVector<f64>) -> f64;

    /// `dim_theta x dim_psi` matrix of `d psi_k / d theta_j`.
    fn jac_psi_theta(&self, y: &Self::Obs, theta: &DVector<f64>) -> DMatrix<f64> {
        numdiff::jacobian(|t| self.psi(y, t), theta, self.dim_psi()).transpose()
    }

    fn jacobian_eta(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        numdiff::jacobian(|e| self.theta_of_eta(e), eta, self.dim_theta()).transpose()
    }

    fn grad_theta_delta(&self, theta: &DVector<f64>) -> DVector<f64> {
        numdiff::gradient(|t| self.delta(t), theta)
    }
}

#[derive(Debug, Clone)]
pub struct GmmBundle {
    pub theta: DVector<f64>,
    pub delta: f64,
    pub v: DMatrix<f64>,
    pub k_theta: DMatrix<f64>,
    pub k_eta: DMatrix<f64>,
    pub grad_theta_delta: DVector<f64>,
    pub grad_eta_delta: DVector<f64>,
    /// Sample moments `psi(Y_i, theta(eta))`, when built from data.
    pub psi_values: Vec<DVector<f64>>,
}

impl GmmBundle {
    pub fn from_parts(
        theta: DVector<f64>,
        delta: f64,
        v: DMatrix<f64>,
        k_theta: DMatrix<f64>,
        g_eta: &DMatrix<f64>,
        grad_theta_delta: DVector<f64>,
    ) -> Result<Self> {
        let (kt, kp) = (theta.len(), v.nrows());
        check_dim("V cols", kp, v.ncols())?;
        check_dim("K_theta rows", kt, k_theta.nrows())?;
        check_dim("K_theta cols", kp, k_theta.ncols())?;
        check_dim("G_eta cols", kt, g_eta.ncols())?;
        check_dim("grad_theta_delta", kt, grad_theta_delta.len())?;
        Ok(Self {
            k_eta: g_eta * &k_theta,
            grad_eta_delta: g_eta * &grad_theta_delta,
            theta,
            delta,
            v: linalg::symmetrize(&v),
            k_theta,
            grad_theta_delta,
            psi_values: Vec::new(),
        })
    }
}

/// Sample analogs at `theta(eta)`; `V` is the uncentered second moment.
pub fn gmm_bundle<M: MomentModel>(model: &M, data: &[M::Obs], eta: &DVector<f64>) -> Result<GmmBundle> {
    if data.is_empty() {
        return Err(MmseError::InvalidInput("empty data".into()));
    }
    check_dim("eta", model.dim_eta(), eta.len())?;
    let theta = model.theta_of_eta(eta);
    let (kt, kp) = (model.dim_theta(), model.dim_psi());
    let parts = exec::par_map(data.len(), |i| {
        (model.psi(&data[i], &theta), model.jac_psi_theta(&data[i], &theta))
    });
    let mut v = DMatrix::zeros(kp, kp);
    let mut k = DMatrix::zeros(kt, kp);
    for (psi, jac) in &parts {
        v += psi * psi.transpose();
        k += jac;
    }
    let n = data.len() as f64;
    let g = if model.dim_eta() == 0 {
        DMatrix::zeros(0, kt)
    } else {
        model.jacobian_eta(eta)
    };
    let mut b = GmmBundle::from_parts(
        theta.clone(),
        model.delta(&theta),
        v / n,
        k / n,
        &g,
        model.grad_theta_delta(&theta),
    )?;
    b.psi_values = parts.into_iter().map(|p| p.0).collect();
    Ok(b)
}

fn not_identified(e: MmseError) -> MmseError {
    match e {
        MmseError::NotIdentified(m) | MmseError::NotPositiveDefinite(m) => {
            MmseError::NotIdentified(format!("eta not identified from the moments ({m})"))
        }
        other => other,
    }
}

/// Minimum-MSE coefficient vector `a`, so that `h(y) = a' psi(y)`.
pub fn a_mmse(bundle: &GmmBundle, omega: &WeightedEuclidean, spec: &NeighborhoodSpec) -> Result<DVector<f64>> {
    a_mmse_with_cutoff(bundle, omega, spec, PINV_RTOL)
}

/// As [`a_mmse`] with an explicit pseudo-inverse cutoff.
pub fn a_mmse_with_cutoff(
    bundle: &GmmBundle,
    omega: &WeightedEuclidean,
    spec: &NeighborhoodSpec,
    rtol: f64,
) -> Result<DVector<f64>> {
    check_dim("omega", bundle.theta.len(), omega.dim())?;
    let kappa = spec.eps_n();
    let kp = bundle.v.nrows();
    let oinv_k = omega.solve_mat(&bundle.k_theta)?;
    let oinv_grad = omega.solve(&bundle.grad_theta_delta)?;
    let ktok = linalg::symmetrize(&(bundle.k_theta.transpose() * &oinv_k));
    // B_kappa = kappa K' O^-1 K + V, so that B^+ = kappa B_kappa^+.
    let (bp, scale) = if kappa == 0.0 {
        (linalg::pinv_sym(&bundle.v, rtol), 0.0)
    } else if kappa.is_infinite() {
        (linalg::pinv_sym(&ktok, rtol), 1.0)
    } else {
        (linalg::pinv_sym(&(&ktok * kappa + &bundle.v), rtol), kappa)
    };
    let ke = &bundle.k_eta;
    let kt_grad = bundle.k_theta.transpose() * oinv_grad;
    if ke.nrows() == 0 {
        return Ok(-(&bp * kt_grad) * scale);
    }
    let m = linalg::symmetrize(&(ke * &bp * ke.transpose()));
    let minv_ge = linalg::spd_solve_vec(&m, &bundle.grad_eta_delta, "K_eta B^+ K_eta'").map_err(not_identified)?;
    let a1 = -(&bp * ke.transpose() * minv_ge);
    if scale == 0.0 {
        return Ok(a1);
    }
    let bp_kg = &bp * &kt_grad;
    let minv_ke_bp_kg = linalg::spd_solve_vec(&m, &(ke * &bp_kg), "K_eta B^+ K_eta'").map_err(not_identified)?;
    let inner = &kt_grad - ke.transpose() * minv_ke_bp_kg;
    let a2 = -(&bp * inner) * scale;
    debug_assert_eq!(a2.len(), kp);
    Ok(a1 + a2)
}

/// `sqrt(eps) || grad_theta_delta + K_theta a ||_{Omega^{-1}}`.
pub fn gmm_bias(a: &DVector<f64>, bundle: &GmmBundle, omega: &WeightedEuclidean, epsilon: f64) -> Result<f64> {
    check_dim("a", bundle.v.nrows(), a.len())?;
    Ok(epsilon.sqrt() * dual_norm_euclidean(&(&bundle.grad_theta_delta + &bundle.k_theta * a), omega)?)
}

/// `eps b(a)^2 / eps + a'Va / n`, i.e. the worst-case MSE of the `a`-estimator.
pub fn gmm_objective(a: &DVector<f64>, bundle: &GmmBundle, omega: &WeightedEuclidean, epsilon: f64, n: usize) -> Result<f64> {
    let b = gmm_bias(a, bundle, omega, epsilon)?;
    Ok(b * b + a.dot(&(&bundle.v * a)) / n as f64)
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub report: EstimateReport,
    pub a: DVector<f64>,
    pub h_values: Vec<f64>,
}

/// `delta(theta(eta)) + a' mean psi(Y_i)`; `a` defaults to the minimum-MSE
/// coefficients.
pub fn gmm_estimate<M: MomentModel>(
    model: &M,
    data: &[M::Obs],
    spec: &NeighborhoodSpec,
    eta: &DVector<f64>,
    a: Option<&DVector<f64>>,
    mu: f64,
) -> Result<GmmFit> {
    let bundle = gmm_bundle(model, data, eta)?;
    let omega = spec.omega()?;
    let a = match a {
        Some(a) => a.clone(),
        None => a_mmse(&bundle, omega, spec)?,
    };
    let h_values: Vec<f64> = bundle.psi_values.iter().map(|p| p.dot(&a)).collect();
    let point = bundle.delta + linalg::mean(&h_values);
    let bias = gmm_bias(&a, &bundle, omega, spec.epsilon)?;
    let report = EstimateReport::new("GMM-MMSE", point, bias, linalg::sample_sd(&h_values), data.len(), spec.epsilon, None, mu)?;
    Ok(GmmFit { report, a, h_values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_bundle(kt: usize, ke: usize, kp: usize, vals: &[f64]) -> GmmBundle {
        let mut it = vals.iter().cycle().copied();
        let k = DMatrix::from_fn(kt, kp, |_, _| it.next().unwrap());
        let l = DMatrix::from_fn(kp, kp, |_, _| it.next().unwrap());
        let v = &l * l.transpose() + DMatrix::identity(kp, kp) * 0.3;
        let g = DMatrix::from_fn(ke, kt, |_, _| it.next().unwrap());
        let grad = DVector::from_fn(kt, |_, _| it.next().unwrap());
        GmmBundle::from_parts(DVector::zeros(kt), 0.0, v, k, &g, grad).unwrap()
    }

    proptest! {
        #[test]
        fn constraint_and_optimality(
            vals in proptest::collection::vec(-1.0f64..1.0, 64),
            kp in 2usize..8,
            eps in 1e-4f64..1.0,
        ) {
            let kt = 3;
            let b = random_bundle(kt, 1, kp, &vals);
            let omega = WeightedEuclidean::identity(kt);
            prop_assume!(linalg::check_condition(&(&b.k_eta * linalg::pinv_sym(&b.v, PINV_RTOL) * b.k_eta.transpose()), "").is_ok());
            let n = 200;
            let spec = NeighborhoodSpec::euclidean(omega.clone(), eps, n).unwrap();
            let a = match a_mmse(&b, &omega, &spec) { Ok(a) => a, Err(_) => return Ok(()) };
            let c = &b.grad_eta_delta + &b.k_eta * &a;
            prop_assert!(c.norm() <= 1e-8 * (1.0 + b.grad_eta_delta.norm()));
            let obj = gmm_objective(&a, &b, &omega, eps, n).unwrap();
            let a0 = a_mmse(&b, &omega, &NeighborhoodSpec::euclidean(omega.clone(), 0.0, n).unwrap()).unwrap();
            let at0 = gmm_objective(&a0, &b, &omega, eps, n).unwrap();
            // Compare with the feasible eps = 0 solution.
            prop_assert!(obj <= at0 * (1.0 + 1e-9) + 1e-12);
            // Without eta the zero vector is feasible.
            let b0 = random_bundle(kt, 0, kp, &vals);
            let a = a_mmse(&b0, &omega, &spec).unwrap();
            let obj = gmm_objective(&a, &b0, &omega, eps, n).unwrap();
            let zero = gmm_objective(&DVector::zeros(kp), &b0, &omega, eps, n).unwrap();
            prop_assert!(obj <= zero * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn cutoff_insensitivity(vals in proptest::collection::vec(-1.0f64..1.0, 64), eps in 1e-3f64..1.0) {
            let b = random_bundle(3, 1, 3, &vals);
            prop_assume!(linalg::check_condition(&b.v, "").is_ok());
            let omega = WeightedEuclidean::identity(3);
            let spec = NeighborhoodSpec::euclidean(omega.clone(), eps, 100).unwrap();
            let (a1, a2) = match (a_mmse_with_cutoff(&b, &omega, &spec, 1e-10), a_mmse_with_cutoff(&b, &omega, &spec, 1e-9)) {
                (Ok(x), Ok(y)) => (x, y),
                _ => return Ok(()),
            };
            let psi = DVector::from_vec(vec![0.3, -1.2, 0.5]);
            prop_assert!((a1.dot(&psi) - a2.dot(&psi)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epsilon_is_optimal_gmm() {
        let vals: Vec<f64> = (0..64).map(|i| ((i * 7 + 3) as f64).sin()).collect();
        let b = random_bundle(3, 1, 4, &vals);
        let omega = WeightedEuclidean::identity(3);
        let spec = NeighborhoodSpec::euclidean(omega.clone(), 0.0, 100).unwrap();
        let a = a_mmse(&b, &omega, &spec).unwrap();
        let vp = linalg::pinv_sym(&b.v, PINV_RTOL);
        let m = &b.k_eta * &vp * b.k_eta.transpose();
        let expected = -(&vp * b.k_eta.transpose() * m.try_inverse().unwrap() * &b.grad_eta_delta);
        assert!((a - expected).amax() < 1e-10);
    }

    #[test]
    fn bias_examples() {
        let vals: Vec<f64> = (0..64).map(|i| ((i * i * 7 + 3) as f64).sin()).collect();
        let b = random_bundle(3, 1, 3, &vals);
        let omega = WeightedEuclidean::identity(3);
        let zero = gmm_bias(&DVector::zeros(3), &b, &omega, 0.25).unwrap();
        assert!((zero - 0.5 * b.grad_theta_delta.norm()).abs() < 1e-14);
        // Square K: a = -K^{-1} grad annihilates the bias.
        let a = -(b.k_theta.clone().try_inverse().unwrap() * &b.grad_theta_delta);
        assert!(gmm_bias(&a, &b, &omega, 0.25).unwrap() < 1e-12);
    }
}
