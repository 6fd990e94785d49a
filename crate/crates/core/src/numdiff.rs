//! Central finite differences with step `1e-5 * (1 + |x_j|)`.

use nalgebra::{DMatrix, DVector};

pub const FD_STEP: f64 = 1e-5;

pub fn step(x: f64) -> f64 {
    FD_STEP * (1.0 + x.abs())
}

pub fn gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = step(x[j]);
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let dn = f(&xp);
        xp[j] = x[j];
        g[j] = (up - dn) / (2.0 * h);
    }
    g
}

/// Jacobian of a vector map, `out_dim x x.len()`.
pub fn jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    out_dim: usize,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(out_dim, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = step(x[j]);
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let dn = f(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((up - dn) / (2.0 * h)));
    }
    jac
}
