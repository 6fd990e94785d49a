use mmse_core::gmm::{a_mmse, gmm_bundle};
use mmse_core::linalg;
use mmse_core::models::gaussian::GaussianLocation;
use mmse_core::models::linear_iv::{LinearIvModel, LinearIvMoments, LinearObs};
use mmse_core::neighborhoods::{NeighborhoodSpec, WeightedEuclidean};
use mmse_core::parametric::{compute_bundle, project, BundleOptions, ParametricPlan, ReferenceModel};
use mmse_core::rng::stream;
use mmse_core::semiparam::{fredholm_exact, simulate_panel, DiscreteMixture, Evaluator, Influence, ModelTarget, SemiparamPlan};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 1_000_000;
const FD: f64 = 1e-5;

/// Categorical outcome on `{0, .., k-1}` with logits `theta` relative to
/// category 0, reference `theta_j = eta (j + 1) + b_j` and `delta = E[Y^2]`.
/// Scores and target gradients use the finite-difference defaults.
struct Categorical {
    base: Vec<f64>,
}

impl Categorical {
    fn probs(&self, theta: &DVector<f64>) -> Vec<f64> {
        let mut l = vec![0.0];
        l.extend(theta.iter().copied());
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
        l.iter().map(|v| (v - m).exp() / z).collect()
    }
}

impl ReferenceModel for Categorical {
    type Obs = usize;

    fn dim_theta(&self) -> usize {
        self.base.len()
    }
    fn dim_eta(&self) -> usize {
        1
    }
    fn log_density(&self, y: &usize, theta: &DVector<f64>) -> f64 {
        self.probs(theta)[*y].ln()
    }
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.base.len(), |j, _| eta[0] * (j + 1) as f64 + self.base[j])
    }
    fn delta(&self, theta: &DVector<f64>) -> f64 {
        self.probs(theta).iter().enumerate().map(|(y, p)| p * (y * y) as f64).sum()
    }
    fn expected_information(&self, theta: &DVector<f64>, _like: Option<&usize>) -> Option<DMatrix<f64>> {
        let p = self.probs(theta);
        let k = self.base.len();
        let mut h = DMatrix::zeros(k, k);
        for (y, py) in p.iter().enumerate() {
            let s = self.score_theta(&y, theta);
            h += &s * s.transpose() * *py;
        }
        Some(h)
    }
    fn simulate(&self, theta: &DVector<f64>, _like: Option<&usize>, rng: &mut ChaCha8Rng) -> Option<usize> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (y, p) in self.probs(theta).iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(y);
            }
        }
        Some(self.base.len())
    }
}

fn categorical() -> Categorical {
    Categorical { base: vec![0.3, -0.2, 0.5, -1.0] }
}

fn linear_model() -> LinearIvModel {
    LinearIvModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 0.9]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        DMatrix::identity(2, 2),
        1.5,
        DVector::from_vec(vec![1.0, -0.5]),
    )
    .unwrap()
}

fn plan_at<M: ReferenceModel>(model: &M, eta: &DVector<f64>, omega: &WeightedEuclidean, eps: f64, n: usize) -> ParametricPlan {
    let b = compute_bundle(model, eta, None, &BundleOptions::default()).unwrap();
    let p = project(&b).unwrap();
    ParametricPlan::new(&b, &p, &NeighborhoodSpec::euclidean(omega.clone(), eps, n).unwrap()).unwrap()
}

/// Mean and sd of `h` over reference draws.
fn mean_sd(h: &[f64]) -> (f64, f64) {
    (linalg::mean(h), linalg::sample_sd(h))
}

fn assert_unbiased(h: &[f64], what: &str) {
    let (m, sd) = mean_sd(h);
    let tol = 4.0 * sd / (h.len() as f64).sqrt();
    assert!(m.abs() <= tol, "{what}: mean h {m:e} exceeds {tol:e}");
}

fn reference_draws<M: ReferenceModel>(model: &M, theta: &DVector<f64>, seed: u64) -> Vec<M::Obs> {
    let mut r = stream(seed, &[0]);
    (0..DRAWS).map(|_| model.simulate(theta, None, &mut r).unwrap()).collect()
}

#[test]
fn parametric_categorical() {
    let m = categorical();
    let eta0 = DVector::from_element(1, 0.2);
    let theta0 = m.theta_of_eta(&eta0);
    let omega = WeightedEuclidean::diagonal(&[1.0, 2.0, 0.5, 1.0]).unwrap();
    let (eps, n) = (0.05, 400);
    let plan = plan_at(&m, &eta0, &omega, eps, n);
    let ys = reference_draws(&m, &theta0, 1);
    let h: Vec<f64> = ys.iter().map(|y| plan.h(&m, y, &theta0)).collect();
    assert_unbiased(&h, "categorical");

    // E_{eta0} h(Y, eta) as an exact sum over the support.
    let p0 = m.probs(&theta0);
    let expected_h = |e: f64| {
        let eta = DVector::from_element(1, e);
        let th = m.theta_of_eta(&eta);
        let pl = plan_at(&m, &eta, &omega, eps, n);
        (0..p0.len()).map(|y| p0[y] * pl.h(&m, &y, &th)).sum::<f64>()
    };
    assert!(expected_h(0.2).abs() < 1e-9);
    let d_eh = (expected_h(0.2 + FD) - expected_h(0.2 - FD)) / (2.0 * FD);
    let delta_at = |e: f64| m.delta(&m.theta_of_eta(&DVector::from_element(1, e)));
    let d_delta = (delta_at(0.2 + FD) - delta_at(0.2 - FD)) / (2.0 * FD);
    assert!((d_delta + d_eh).abs() <= 1e-3, "{d_delta} + {d_eh}");
}

#[test]
fn parametric_gaussian() {
    for free in [false, true] {
        let m = GaussianLocation { theta_ref: 0.4, free };
        let eta0 = DVector::from_element(usize::from(free), 0.4);
        let theta0 = m.theta_of_eta(&eta0);
        let plan = plan_at(&m, &eta0, &WeightedEuclidean::identity(1), 0.02, 500);
        let ys = reference_draws(&m, &theta0, 2);
        let h: Vec<f64> = ys.iter().map(|y| plan.h(&m, y, &theta0)).collect();
        assert_unbiased(&h, "gaussian");
        if free {
            // h(y, eta) = y - eta; E dh/deta = -1 = -d delta / d eta.
            let y = 1.3;
            let h_at = |e: f64| plan_at(&m, &DVector::from_element(1, e), &WeightedEuclidean::identity(1), 0.02, 500).h(&m, &y, &DVector::from_element(1, e));
            let d = (h_at(0.4 + FD) - h_at(0.4 - FD)) / (2.0 * FD);
            assert!((1.0 + d).abs() < 1e-6);
        }
    }
}

#[test]
fn parametric_linear() {
    let m = linear_model();
    let beta0 = DVector::from_vec(vec![1.0, -0.5]);
    let theta0 = m.theta_of_eta(&beta0);
    let omega = LinearIvModel::block_omega(&DMatrix::identity(2, 2), &DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0])).unwrap();
    let plan = plan_at(&m, &beta0, &omega, 0.03, 1000);
    let ys = reference_draws(&m, &theta0, 3);
    let h: Vec<f64> = ys.iter().map(|y| plan.h(&m, y, &theta0)).collect();
    assert_unbiased(&h, "linear");

    // With Gaussian errors, E_{beta0} h(Y, beta) = coef(beta)' E[s(Y, theta(beta))]
    // and E[s] = H[:, beta] (beta0 - beta).
    let info = m.information();
    let expected_h = |b: &DVector<f64>| {
        let pl = plan_at(&m, b, &omega, 0.03, 1000);
        let es = info.columns(0, 2) * (&beta0 - b);
        pl.coef.dot(&es)
    };
    for j in 0..2 {
        let mut up = beta0.clone();
        let mut dn = beta0.clone();
        up[j] += FD;
        dn[j] -= FD;
        let d_eh = (expected_h(&up) - expected_h(&dn)) / (2.0 * FD);
        let d_delta = (m.delta(&m.theta_of_eta(&up)) - m.delta(&m.theta_of_eta(&dn))) / (2.0 * FD);
        assert!((d_delta + d_eh).abs() <= 1e-3, "component {j}: {d_delta} + {d_eh}");
    }
}

#[test]
fn gmm_linear() {
    let m = linear_model();
    let mm = LinearIvMoments(&m);
    let beta0 = DVector::from_vec(vec![1.0, -0.5]);
    let theta0 = m.theta_of_eta(&beta0);
    let mut r = stream(4, &[0]);
    let sample: Vec<LinearObs> = (0..2000).map(|_| m.simulate(&theta0, None, &mut r).unwrap()).collect();
    let omega = LinearIvModel::block_omega(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
    let spec = NeighborhoodSpec::euclidean(omega.clone(), 0.03, sample.len()).unwrap();
    let bundle = gmm_bundle(&mm, &sample, &beta0).unwrap();
    let a = a_mmse(&bundle, &omega, &spec).unwrap();
    let c = &bundle.grad_eta_delta + &bundle.k_eta * &a;
    assert!(c.norm() < 1e-8);

    let ys = reference_draws(&m, &theta0, 5);
    use mmse_core::gmm::MomentModel;
    let h: Vec<f64> = ys.iter().map(|y| mm.psi(y, &theta0).dot(&a)).collect();
    assert_unbiased(&h, "gmm");

    // Sample-analog FD: d/d beta of mean a' psi(Y_i, beta) equals K_eta a.
    let mean_h = |b: &DVector<f64>| linalg::mean(&sample.iter().map(|y| mm.psi(y, &m.theta_of_eta(b)).dot(&a)).collect::<Vec<_>>());
    for j in 0..2 {
        let mut up = beta0.clone();
        let mut dn = beta0.clone();
        up[j] += FD;
        dn[j] -= FD;
        let d_eh = (mean_h(&up) - mean_h(&dn)) / (2.0 * FD);
        assert!((bundle.grad_eta_delta[j] + d_eh).abs() <= 1e-3);
    }
}

fn tilted(seed: u64) -> DiscreteMixture {
    let mut r = stream(seed, &[1]);
    let (ny, na) = (6, 4);
    let mut g = DMatrix::from_fn(ny, na, |_, _| r.random_range(0.05..1.0f64).powi(3));
    for mut col in g.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    let pi = DVector::from_vec(vec![0.3, 0.2, 0.25, 0.25]);
    let delta = DVector::from_vec(vec![-1.0, 0.2, 0.7, 1.5]);
    DiscreteMixture::new(g, pi, delta, Some(DVector::from_vec(vec![-1.0, -0.3, 0.4, 1.1]))).unwrap()
}

/// The mixture with `pi` tilted by `gamma`, re-centred so the new tilt is estimated at zero.
fn shift_tilt(m: &DiscreteMixture, gamma: f64) -> DiscreteMixture {
    let t = m.tilt.clone().unwrap();
    let mut pi = m.pi.component_mul(&t.map(|v| (gamma * v).exp()));
    pi /= pi.sum();
    DiscreteMixture::new(m.g.clone(), pi, m.delta.clone(), Some(t)).unwrap()
}

#[test]
fn semiparametric_exact_solution() {
    let m = tilted(11);
    let kappa = 8.0;
    let f0 = m.f();
    let sol = fredholm_exact(&m, kappa, None).unwrap();
    assert!(f0.dot(&sol.h).abs() < 1e-12);
    let expected_h = |gamma: f64| f0.dot(&fredholm_exact(&shift_tilt(&m, gamma), kappa, None).unwrap().h);
    let d_eh = (expected_h(FD) - expected_h(-FD)) / (2.0 * FD);
    let d_delta = (shift_tilt(&m, FD).delta0() - shift_tilt(&m, -FD).delta0()) / (2.0 * FD);
    assert!((d_delta + d_eh).abs() <= 1e-3, "{d_delta} + {d_eh}");
}

#[test]
fn semiparametric_simulated_solution() {
    let m = tilted(11);
    let panel = simulate_panel(&m, 2_000_000, 7).unwrap();
    let target = ModelTarget(&m);
    let ev = Evaluator::new(&m, &panel, &target, &[1.0]).unwrap();
    let plan = SemiparamPlan::new(&panel, &target, 8.0, &[1.0]).unwrap();
    let atoms: Vec<usize> = (0..m.ny()).collect();
    let h_atoms = ev.h_at(Influence::Plan(&plan), 0, &atoms).unwrap();

    let mut r = stream(8, &[0]);
    let cdf: Vec<f64> = m.f().iter().scan(0.0, |acc, p| {
        *acc += p;
        Some(*acc)
    }).collect();
    let h: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let u: f64 = r.random();
            h_atoms[cdf.iter().position(|&c| u < c).unwrap_or(m.ny() - 1)]
        })
        .collect();
    assert_unbiased(&h, "semiparametric");

    // E d h / d gamma = -E[h s] along the model. Under the panel's own
    // reference measure the engine satisfies the constraint exactly.
    let c = &panel.cells[0];
    let sim = c.s as f64;
    let h_panel = ev.h_at(Influence::Plan(&plan), 0, &c.y_atoms).unwrap();
    let e_hs: f64 = (0..c.y_atoms.len()).map(|j| c.y_counts[j] * h_panel[j] * c.d[(j, 0)]).sum::<f64>() / sim;
    let d_delta: f64 = (0..c.a_atoms.len())
        .map(|k| c.a_counts[k] * m.delta[c.a_atoms[k] as usize] * c.latent_score[(k, 0)])
        .sum::<f64>()
        / sim;
    assert!((d_delta - e_hs).abs() <= 1e-3, "{d_delta} vs {e_hs}");

    // Against the exact model: finite differences of delta and exact scores,
    // up to simulation error of order S^{-1/2}.
    let (s, _) = m.scores().unwrap();
    let f = m.f();
    let e_hs: f64 = (0..m.ny()).map(|y| f[y] * h_atoms[y] * s[y]).sum();
    let d_delta = (shift_tilt(&m, FD).delta0() - shift_tilt(&m, -FD).delta0()) / (2.0 * FD);
    assert!((d_delta - e_hs).abs() <= 4.0 / sim.sqrt(), "{d_delta} vs {e_hs}");
}

#[test]
fn joint_scaling_invariance() {
    let m = linear_model();
    let beta0 = DVector::from_vec(vec![1.0, -0.5]);
    let theta0 = m.theta_of_eta(&beta0);
    let omega = LinearIvModel::block_omega(&DMatrix::identity(2, 2), &DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0])).unwrap();
    let mut r = stream(9, &[0]);
    let ys: Vec<LinearObs> = (0..50).map(|_| m.simulate(&theta0, None, &mut r).unwrap()).collect();
    let base = plan_at(&m, &beta0, &omega, 0.03, 1000);
    let mm = LinearIvMoments(&m);
    let gb = gmm_bundle(&mm, &ys, &beta0).unwrap();
    let a_base = a_mmse(&gb, &omega, &NeighborhoodSpec::euclidean(omega.clone(), 0.03, 1000).unwrap()).unwrap();
    for c in [0.1, 10.0] {
        let om = omega.scaled(c).unwrap();
        let scaled = plan_at(&m, &beta0, &om, 0.03 * c, 1000);
        let a = a_mmse(&gb, &om, &NeighborhoodSpec::euclidean(om.clone(), 0.03 * c, 1000).unwrap()).unwrap();
        for y in &ys {
            assert!((base.h(&m, y, &theta0) - scaled.h(&m, y, &theta0)).abs() < 1e-10);
            let psi = mmse_core::gmm::MomentModel::psi(&mm, y, &theta0);
            assert!((psi.dot(&a_base) - psi.dot(&a)).abs() < 1e-10);
        }
        assert!((base.bias - scaled.bias).abs() < 1e-10);
    }
}
