use mmse_core::calibration::{detection_error_mc, epsilon_parametric, epsilon_semiparam};
use mmse_core::gmm::{a_mmse, GmmBundle};
use mmse_core::models::ate::{aipw, bias_ate, delta_ate_mmse, h_ate, AteModel, AteObs};
use mmse_core::models::gaussian::GaussianLocation;
use mmse_core::models::linear_iv::{epsilon_linear, h_linear, h_linear_iv_limit, LinearIvModel, LinearObs};
use mmse_core::models::probit::{Dgp, DynProbitModel};
use mmse_core::neighborhoods::NeighborhoodSpec;
use mmse_core::parametric::{compute_bundle, project, BundleOptions, ParametricPlan, ReferenceModel};
use mmse_core::rng::stream;
use mmse_core::semiparam::{fredholm_exact, DiscreteMixture};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn linear_model(sigma2: f64) -> LinearIvModel {
    LinearIvModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 0.9]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]),
        sigma2,
        DVector::from_vec(vec![1.0, -0.5]),
    )
    .unwrap()
}

fn sample(m: &LinearIvModel, n: usize) -> Vec<LinearObs> {
    let mut r = stream(1, &[0]);
    let beta = DVector::from_vec(vec![1.0, -0.5]);
    (0..n).map(|_| m.simulate_obs(&beta, &DVector::from_vec(vec![0.4, 0.1]), &mut r)).collect()
}

#[test]
fn linear_ols_and_iv_limits() {
    let m = linear_model(1.0);
    let beta = DVector::from_vec(vec![0.9, -0.4]);
    let omega_rho = DMatrix::identity(2, 2);
    let sx_inv = m.sigma_x().clone().try_inverse().unwrap();
    for o in sample(&m, 100) {
        let r = o.y - o.x.dot(&beta);
        let ols = r * o.x.dot(&(&sx_inv * &m.c));
        assert!((h_linear(&o, &beta, &m, &omega_rho, 0.0).unwrap() - ols).abs() <= 1e-12);
        let iv = h_linear_iv_limit(&o, &beta, &m).unwrap();
        assert!((h_linear(&o, &beta, &m, &omega_rho, 1e12).unwrap() - iv).abs() <= 1e-6);
        assert!((h_linear(&o, &beta, &m, &omega_rho, f64::INFINITY).unwrap() - iv).abs() <= 1e-8);
    }
}

#[test]
fn linear_closed_form_matches_likelihood_engine() {
    for sigma2 in [1.0, 2.5] {
        let m = linear_model(sigma2);
        let beta = DVector::from_vec(vec![1.0, -0.5]);
        let theta = m.theta_of_eta(&beta);
        let omega_rho = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let omega = LinearIvModel::block_omega(&DMatrix::identity(2, 2), &omega_rho).unwrap();
        let bundle = compute_bundle(&m, &beta, None, &BundleOptions::default()).unwrap();
        let projected = project(&bundle).unwrap();
        for eps in [0.0, 1e-3, 0.05, 2.0] {
            let spec = NeighborhoodSpec::euclidean(omega.clone(), eps, 400).unwrap();
            let plan = ParametricPlan::new(&bundle, &projected, &spec).unwrap();
            for o in sample(&m, 50) {
                let closed = h_linear(&o, &beta, &m, &omega_rho, spec.eps_n()).unwrap();
                assert!((plan.h(&m, &o, &theta) - closed).abs() <= 1e-8, "sigma2 {sigma2} eps {eps}");
            }
        }
        let a = epsilon_linear(0.01, 400, &m, &omega_rho).unwrap().epsilon;
        let b = epsilon_parametric(0.01, 400, &projected, &omega).unwrap().epsilon;
        assert!((a / b - 1.0).abs() <= 1e-8);
    }
}

#[test]
fn score_moments_reproduce_likelihood_adjustment() {
    let m = linear_model(1.3);
    let beta = DVector::from_vec(vec![1.0, -0.5]);
    let theta = m.theta_of_eta(&beta);
    let omega = LinearIvModel::block_omega(&DMatrix::identity(2, 2), &DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0])).unwrap();
    let bundle = compute_bundle(&m, &beta, None, &BundleOptions::default()).unwrap();
    let projected = project(&bundle).unwrap();
    let info = m.information();
    let gb = GmmBundle::from_parts(theta.clone(), m.delta(&theta), info.clone(), -info, &m.jacobian_eta(&beta), m.grad_theta_delta(&theta)).unwrap();
    for eps in [0.0, 0.02, 1.0] {
        let spec = NeighborhoodSpec::euclidean(omega.clone(), eps, 300).unwrap();
        let plan = ParametricPlan::new(&bundle, &projected, &spec).unwrap();
        let a = a_mmse(&gb, &omega, &spec).unwrap();
        for o in sample(&m, 50) {
            let s = m.score_theta(&o, &theta);
            assert!((plan.h(&m, &o, &theta) - s.dot(&a)).abs() <= 1e-8);
        }
    }
}

/// Potential outcomes on a product grid with independent marginals; the
/// observed outcome is `(d, y_d)`, coded as `d * k + index(y_d)`.
fn ate_mixture(p: f64, y: &[f64], w0: &[f64], w1: &[f64]) -> DiscreteMixture {
    let k = y.len();
    let mut g = DMatrix::zeros(2 * k, k * k);
    let mut pi = DVector::zeros(k * k);
    let mut delta = DVector::zeros(k * k);
    for i0 in 0..k {
        for i1 in 0..k {
            let a = i0 * k + i1;
            g[(i0, a)] = 1.0 - p;
            g[(k + i1, a)] = p;
            pi[a] = w0[i0] * w1[i1];
            delta[a] = y[i1] - y[i0];
        }
    }
    DiscreteMixture::new(g, pi, delta, None).unwrap()
}

#[test]
fn ate_closed_form_matches_discretized_operator() {
    let y = [-1.0, -0.2, 0.5, 1.4, 2.0];
    let w0 = [0.1, 0.3, 0.3, 0.2, 0.1];
    let w1 = [0.05, 0.15, 0.3, 0.3, 0.2];
    let mean = |w: &[f64]| y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    let p = 0.35;
    let mix = ate_mixture(p, &y, &w0, &w1);
    let model = AteModel::constant_propensity(p, DVector::from_element(1, mean(&w0)), DVector::from_element(1, mean(&w1)), 1.0).unwrap();
    let one = DVector::from_element(1, 1.0);
    for eps_n in [0.1, 1.0, 10.0, 1e3] {
        let sol = fredholm_exact(&mix, eps_n, None).unwrap();
        for (j, &yj) in y.iter().enumerate() {
            for d in [false, true] {
                let h = h_ate(&AteObs { y: yj, d, x: one.clone() }, &model, eps_n).unwrap();
                let atom = if d { y.len() + j } else { j };
                assert!((sol.h[atom] - h).abs() <= 1e-3, "eps_n {eps_n} d {d} y {yj}: {} vs {h}", sol.h[atom]);
            }
        }
    }
}

fn ate_data(model: &AteModel, n: usize) -> Vec<AteObs> {
    let mut r = stream(2, &[0]);
    (0..n)
        .map(|_| {
            let x = DVector::from_vec(vec![1.0, r.random_range(-1.0..1.0)]);
            let d = r.random_bool(model.p(&x).unwrap());
            let e: f64 = StandardNormal.sample(&mut r);
            let g = if d { &model.gamma1 } else { &model.gamma0 };
            AteObs { y: x.dot(g) + 0.3 * x[1] * x[1] + e, d, x }
        })
        .collect()
}

#[test]
fn ate_large_neighborhood_is_aipw() {
    let model = AteModel::new(
        std::sync::Arc::new(|x: &DVector<f64>| 0.3 + 0.2 * x[1].tanh()),
        DVector::from_vec(vec![0.5, 1.0]),
        DVector::from_vec(vec![1.5, 0.2]),
        1.0,
    )
    .unwrap();
    let data = ate_data(&model, 400);
    let mmse = delta_ate_mmse(&data, &model, 1e12).unwrap();
    assert!((mmse - aipw(&data, &model).unwrap()).abs() <= 1e-8);
    // Small neighborhoods stay close to the plug-in.
    let plug: f64 = data.iter().map(|o| model.plug_in(&o.x)).sum::<f64>() / data.len() as f64;
    assert!((delta_ate_mmse(&data, &model, 1e-9).unwrap() - plug).abs() < 1e-6);
    let xs: Vec<_> = data.iter().map(|o| o.x.clone()).collect();
    let b: Vec<f64> = [0.001, 0.01, 0.1].iter().map(|&e| bias_ate(&xs, &model, e, 400).unwrap()).collect();
    assert!(b.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn zero_shift_is_the_reference() {
    let m = DynProbitModel::new(0.5, -0.25, 0.5, 0.8, 5).unwrap();
    assert_eq!(m.simulate(200, Dgp::Shifted(0.0), 3), m.simulate(200, Dgp::Reference, 3));
    assert_eq!(m.true_delta(Dgp::Shifted(0.0)), m.true_delta(Dgp::Reference));
}

#[test]
fn detection_error_at_calibrated_epsilon() {
    let eps = epsilon_semiparam(0.05, 200, 1.0).unwrap().epsilon;
    let model = GaussianLocation { theta_ref: 0.0, free: true };
    let de = detection_error_mc(&model, &DVector::zeros(1), &DVector::from_element(1, eps.sqrt()), 200, 4000, 5).unwrap();
    assert!((de.estimate - 0.05).abs() <= 4.0 * de.se, "{} +/- {}", de.estimate, de.se);
    assert!(detection_error_mc(&model, &DVector::zeros(1), &DVector::zeros(1), 10, 50, 1).is_err());
}
