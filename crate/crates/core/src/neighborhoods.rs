//! Neighborhoods of the reference model and their dual norms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, MmseError, Result};
use crate::linalg;

/// Weighted Euclidean distance `||theta0 - theta||^2_Omega`.
#[derive(Debug, Clone)]
pub struct WeightedEuclidean {
    omega: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl WeightedEuclidean {
    pub fn new(omega: DMatrix<f64>) -> Result<Self> {
        if omega.nrows() != omega.ncols() {
            return Err(MmseError::DimensionMismatch {
                context: "omega must be square",
                expected: omega.nrows(),
                got: omega.ncols(),
            });
        }
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(MmseError::InvalidInput("omega has non-finite entries".into()));
        }
        if linalg::relative_asymmetry(&omega) > 1e-12 {
            return Err(MmseError::NotSymmetric("omega".into()));
        }
        let chol = Cholesky::new(linalg::symmetrize(&omega))
            .ok_or_else(|| MmseError::NotPositiveDefinite("omega".into()))?;
        Ok(Self { omega, chol })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn diagonal(weights: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(weights)))
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// `Omega^{-1} u` by the stored Cholesky factor.
    pub fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("omega solve", self.dim(), u.len())?;
        Ok(self.chol.solve(u))
    }

    pub fn solve_mat(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("omega solve", self.dim(), u.nrows())?;
        Ok(self.chol.solve(u))
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.omega * c)
    }
}

/// Twice the Kullback-Leibler divergence on the latent density.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KlNeighborhood;

#[derive(Debug, Clone)]
pub enum Distance {
    Euclidean(WeightedEuclidean),
    Kl(KlNeighborhood),
}

#[derive(Debug, Clone)]
pub struct NeighborhoodSpec {
    pub distance: Distance,
    pub epsilon: f64,
    pub n: usize,
}

impl NeighborhoodSpec {
    pub fn new(distance: Distance, epsilon: f64, n: usize) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(MmseError::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if n == 0 {
            return Err(MmseError::InvalidInput("n must be >= 1".into()));
        }
        Ok(Self { distance, epsilon, n })
    }

    pub fn euclidean(omega: WeightedEuclidean, epsilon: f64, n: usize) -> Result<Self> {
        Self::new(Distance::Euclidean(omega), epsilon, n)
    }

    pub fn kl(epsilon: f64, n: usize) -> Result<Self> {
        Self::new(Distance::Kl(KlNeighborhood), epsilon, n)
    }

    /// The product `epsilon * n`, the only combination entering the estimators.
    pub fn eps_n(&self) -> f64 {
        self.epsilon * self.n as f64
    }

    pub fn omega(&self) -> Result<&WeightedEuclidean> {
        match &self.distance {
            Distance::Euclidean(w) => Ok(w),
            Distance::Kl(_) => Err(MmseError::InvalidInput(
                "a weighted Euclidean neighborhood is required".into(),
            )),
        }
    }
}

/// `sqrt(u' Omega^{-1} u)`.
pub fn dual_norm_euclidean(u: &DVector<f64>, omega: &WeightedEuclidean) -> Result<f64> {
    let x = omega.solve(u)?;
    Ok(u.dot(&x).max(0.0).sqrt())
}

fn check_weights(q: &[f64], w: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(MmseError::InvalidInput("empty support".into()));
    }
    check_dim("kl weights", q.len(), w.len())?;
    if w.iter().any(|&x| !(x >= 0.0)) {
        return Err(MmseError::InvalidInput("negative weight".into()));
    }
    let total: f64 = linalg::pairwise_sum(w);
    if (total - 1.0).abs() > 1e-10 {
        return Err(MmseError::InvalidInput(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Standard deviation of `q` under the reference weights.
pub fn dual_norm_kl(q: &[f64], weights: &[f64]) -> Result<f64> {
    check_weights(q, weights)?;
    let m: f64 = linalg::pairwise_sum(&q.iter().zip(weights).map(|(a, b)| a * b).collect::<Vec<_>>());
    let v: f64 = linalg::pairwise_sum(
        &q.iter()
            .zip(weights)
            .map(|(a, b)| b * (a - m) * (a - m))
            .collect::<Vec<_>>(),
    );
    Ok(v.max(0.0).sqrt())
}

/// Uniform-weight version for Monte Carlo draws.
pub fn dual_norm_kl_uniform(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(MmseError::InvalidInput("empty support".into()));
    }
    let w = vec![1.0 / q.len() as f64; q.len()];
    dual_norm_kl(q, &w)
}

/// Result of the exponential-tilting oracle.
#[derive(Debug, Clone, Copy)]
pub struct TiltResult {
    pub shift: f64,
    pub kl_attained: f64,
    pub tilt: f64,
}

struct Tilt<'a> {
    q: &'a [f64],
    w: &'a [f64],
    mean: f64,
}

impl Tilt<'_> {
    /// Returns (twice KL of the tilted law from the reference, tilted mean).
    fn eval(&self, t: f64) -> (f64, f64) {
        let zmax = self
            .q
            .iter()
            .zip(self.w)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&q, _)| t * (q - self.mean))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut zq = 0.0;
        for (&q, &w) in self.q.iter().zip(self.w) {
            if w > 0.0 {
                let e = w * (t * (q - self.mean) - zmax).exp();
                z += e;
                zq += e * (q - self.mean);
            }
        }
        let k = zmax + z.ln();
        let mean_tilted = zq / z;
        (2.0 * (t * mean_tilted - k), mean_tilted + self.mean)
    }
}

/// Worst-case mean shift of `q` over the KL ball, scaled by `epsilon^{-1/2}`.
///
/// Solves for the tilt `t` at which twice the KL divergence equals `epsilon`
/// by bisection.
pub fn exponential_tilt_check(q: &[f64], weights: &[f64], epsilon: f64) -> Result<TiltResult> {
    check_weights(q, weights)?;
    if !(epsilon > 0.0) {
        return Err(MmseError::InvalidInput("epsilon must be > 0".into()));
    }
    let mean: f64 = q.iter().zip(weights).map(|(a, b)| a * b).sum();
    let sd = dual_norm_kl(q, weights)?;
    if sd <= 1e-300 {
        return Ok(TiltResult { shift: 0.0, kl_attained: 0.0, tilt: 0.0 });
    }
    let tilt = Tilt { q, w: weights, mean };
    let mut hi = epsilon.sqrt() / sd;
    let mut doublings = 0;
    while tilt.eval(hi).0 < epsilon {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 || !hi.is_finite() {
            return Err(MmseError::NonConvergence(
                "KL ball larger than the attainable tilts".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tilt.eval(mid).0 < epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            let (d, m) = tilt.eval(hi);
            return Ok(TiltResult {
                shift: (m - mean) / epsilon.sqrt(),
                kl_attained: d,
                tilt: hi,
            });
        }
    }
    Err(MmseError::NonConvergence("tilt bisection".into()))
}
