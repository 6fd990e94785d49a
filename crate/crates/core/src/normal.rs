//! Standard normal density, distribution and quantile functions.
//!
//! The CDF is computed from the complementary error function.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// log Phi(x), accurate far into the lower tail.
pub fn ln_cdf(x: f64) -> f64 {
    if x > -30.0 {
        cdf(x).ln()
    } else {
        // Mills-ratio asymptotic series.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// phi(x) / Phi(x), the inverse Mills ratio, stable for very negative x.
pub fn mills(x: f64) -> f64 {
    (ln_pdf(x) - ln_cdf(x)).exp()
}

/// Inverse of the standard normal CDF.
///
/// Returns `-inf` at 0 and `+inf` at 1; NaN outside [0, 1].
pub fn inv_cdf(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // One Halley step against the accurate CDF.
    let e = if x < 0.0 { cdf(x) - p } else { (1.0 - p) - cdf(-x) };
    let u = e / pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference quantiles computed with mpmath at 30 digits.
    const QUANTILES: &[(f64, f64)] = &[
        (0.5, 0.0),
        (0.975, 1.959_963_984_540_054),
        (0.01, -2.326_347_874_040_841),
        (1e-10, -6.361_340_902_404_056),
        (1e-15, -7.941_345_326_170_997),
        (0.3, -0.524_400_512_708_041),
        (0.9, 1.281_551_565_544_600_5),
    ];

    #[test]
    fn quantile_matches_high_precision_values() {
        for &(p, z) in QUANTILES {
            assert!((inv_cdf(p) - z).abs() < 1e-9, "p={p}: {} vs {z}", inv_cdf(p));
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..200 {
            let p = i as f64 / 200.0;
            assert!((cdf(inv_cdf(p)) - p).abs() < 1e-14);
        }
        for k in 1..15 {
            let p = 10f64.powi(-k);
            let z = inv_cdf(p);
            assert!(((cdf(z) - p) / p).abs() < 1e-10, "p={p}");
            if k <= 8 {
                assert!((inv_cdf(1.0 - p) + z).abs() < 1e-6 * z.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cdf_reference_values() {
        assert!((cdf(0.5) - 0.691_462_461_274_013_1).abs() < 1e-15);
        assert!((cdf(0.5) - cdf(0.0) - 0.191_462_461_274_013_1).abs() < 1e-15);
        assert!((cdf(-8.0) / 6.220_960_574_271_784e-16 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn ln_cdf_tail_is_continuous() {
        let a = ln_cdf(-29.999_999);
        let b = ln_cdf(-30.000_001);
        assert!((a - b).abs() < 1e-4);
        assert!(ln_cdf(-40.0).is_finite());
        assert!((mills(0.0) - 2.0 * pdf(0.0)).abs() < 1e-15);
    }
}
