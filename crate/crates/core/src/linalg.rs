//! Dense symmetric linear algebra shared by the engines.
//!
//! Every generalized inverse in the crate goes through [`pinv_sym`] or
//! [`pinv`] with the same relative cutoff.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{MmseError, Result};

/// Singular values below this fraction of the largest one are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

/// Largest admissible condition number for matrices that must be invertible.
pub const MAX_CONDITION: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Eigendecomposition of the symmetric part of `m`, eigenvalues ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (values, _) = sym_eigen(m);
    values[values.len() - 1]
}

/// Moore-Penrose inverse of a symmetric matrix.
pub fn pinv_sym(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (values, vectors) = sym_eigen(m);
    let cutoff = rtol * values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let inv = DVector::from_iterator(
        n,
        values
            .iter()
            .map(|&v| if v.abs() > cutoff && v != 0.0 { 1.0 / v } else { 0.0 }),
    );
    &vectors * DMatrix::from_diagonal(&inv) * vectors.transpose()
}

/// Moore-Penrose inverse of a general matrix via SVD.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = rtol * smax;
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let k = svd.singular_values.len();
    let mut sinv = DMatrix::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cutoff && s != 0.0 {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

/// Cholesky factor of an SPD matrix, failing rather than regularizing.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(symmetrize(m))
        .ok_or_else(|| MmseError::NotPositiveDefinite(what.to_string()))
}

/// Solves `m x = b` for SPD `m` by Cholesky, checking conditioning.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    check_condition(m, what)?;
    let chol = cholesky(m, what)?;
    Ok(chol.solve(b))
}

pub fn spd_solve_vec(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    check_condition(m, what)?;
    let chol = cholesky(m, what)?;
    Ok(chol.solve(b))
}

/// Errors when a symmetric matrix has condition number above [`MAX_CONDITION`]
/// or a non-positive eigenvalue.
pub fn check_condition(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let (values, _) = sym_eigen(m);
    let lo = values[0];
    let hi = values[values.len() - 1];
    if !(lo > 0.0) || !hi.is_finite() || hi / lo > MAX_CONDITION {
        return Err(MmseError::NotIdentified(format!(
            "{what}: eigenvalues in [{lo:e}, {hi:e}]"
        )));
    }
    Ok(())
}

/// Symmetric inverse square root of an SPD matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen(m);
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(MmseError::NotPositiveDefinite(what.to_string()));
    }
    let d = DVector::from_iterator(values.len(), values.iter().map(|v| 1.0 / v.sqrt()));
    Ok(&vectors * DMatrix::from_diagonal(&d) * vectors.transpose())
}

/// Solves a general square system by LU with partial pivoting.
pub fn lu_solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| MmseError::Singular(what.to_string()))
}

/// Pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor (0 for fewer than two values).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (pairwise_sum(&dev) / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let m = &v * v.transpose();
        let p = pinv_sym(&m, PINV_RTOL);
        // A A^+ A = A
        let back = &m * &p * &m;
        assert!((back - &m).amax() < 1e-12);
        let g = pinv(&m, PINV_RTOL);
        assert!((g - p).amax() < 1e-12);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(spd_solve_vec(&m, &b, "test").is_err());
    }

    #[test]
    fn eigen_sorted_ascending() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, _) = sym_eigen(&m);
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        assert!((lambda_max_sym(&m) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
    }
}
