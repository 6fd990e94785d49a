//! Unit-variance Gaussian location model, `f_theta = N(theta, 1)`, `delta = theta`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::parametric::ReferenceModel;

/// With `free = false` the reference pins `theta` at `theta_ref` (known eta);
/// with `free = true` the reference is saturated, `theta(eta) = eta`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianLocation {
    pub theta_ref: f64,
    pub free: bool,
}

impl GaussianLocation {
    pub fn known(theta_ref: f64) -> Self {
        Self { theta_ref, free: false }
    }
}

impl ReferenceModel for GaussianLocation {
    type Obs = f64;

    fn dim_theta(&self) -> usize {
        1
    }
    fn dim_eta(&self) -> usize {
        usize::from(self.free)
    }
    fn log_density(&self, y: &f64, theta: &DVector<f64>) -> f64 {
        crate::normal::ln_pdf(y - theta[0])
    }
    fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        if self.free {
            eta.clone()
        } else {
            DVector::from_element(1, self.theta_ref)
        }
    }
    fn delta(&self, theta: &DVector<f64>) -> f64 {
        theta[0]
    }
    fn score_theta(&self, y: &f64, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, y - theta[0])
    }
    fn jacobian_eta(&self, _eta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(usize::from(self.free), 1, 1.0)
    }
    fn grad_theta_delta(&self, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
    fn expected_information(&self, _theta: &DVector<f64>, _like: Option<&f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.0))
    }
    fn simulate(&self, theta: &DVector<f64>, _like: Option<&f64>, rng: &mut ChaCha8Rng) -> Option<f64> {
        let z: f64 = StandardNormal.sample(rng);
        Some(theta[0] + z)
    }
}
