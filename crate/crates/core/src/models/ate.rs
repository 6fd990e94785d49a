//! Average treatment effect under a linear reference model for the
//! conditional means, `E[Y | X, D = d] = X'gamma_d`, with known propensity.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{check_dim, MmseError, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct AteObs {
    pub y: f64,
    pub d: bool,
    pub x: DVector<f64>,
}

pub type Propensity = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct AteModel {
    pub propensity: Propensity,
    pub gamma0: DVector<f64>,
    pub gamma1: DVector<f64>,
    pub sigma2: f64,
}

impl fmt::Debug for AteModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AteModel")
            .field("gamma0", &self.gamma0)
            .field("gamma1", &self.gamma1)
            .field("sigma2", &self.sigma2)
            .finish_non_exhaustive()
    }
}

impl AteModel {
    pub fn new(propensity: Propensity, gamma0: DVector<f64>, gamma1: DVector<f64>, sigma2: f64) -> Result<Self> {
        check_dim("gamma1", gamma0.len(), gamma1.len())?;
        if !(sigma2 > 0.0) {
            return Err(MmseError::InvalidInput("sigma^2 must be positive".into()));
        }
        Ok(Self { propensity, gamma0, gamma1, sigma2 })
    }

    pub fn constant_propensity(p: f64, gamma0: DVector<f64>, gamma1: DVector<f64>, sigma2: f64) -> Result<Self> {
        Self::new(Arc::new(move |_| p), gamma0, gamma1, sigma2)
    }

    pub fn p(&self, x: &DVector<f64>) -> Result<f64> {
        let p = (self.propensity)(x);
        if (0.0..=1.0).contains(&p) {
            Ok(p)
        } else {
            Err(MmseError::InvalidInput(format!("propensity {p} outside [0, 1]")))
        }
    }

    pub fn plug_in(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.gamma1 - &self.gamma0))
    }
}

fn lambda(eps_n: f64) -> Result<f64> {
    if eps_n > 0.0 {
        Ok(1.0 / eps_n)
    } else {
        Err(MmseError::InvalidInput(format!("eps*n must be positive, got {eps_n}")))
    }
}

/// `d (y - x'g1) / (p + lambda) - (1 - d)(y - x'g0) / (1 - p + lambda)` with
/// `lambda = 1 / (eps n)`; `eps n = inf` gives inverse propensity weighting.
pub fn h_ate(obs: &AteObs, model: &AteModel, eps_n: f64) -> Result<f64> {
    check_dim("x", model.gamma0.len(), obs.x.len())?;
    let lam = lambda(eps_n)?;
    let p = model.p(&obs.x)?;
    Ok(if obs.d {
        (obs.y - obs.x.dot(&model.gamma1)) / (p + lam)
    } else {
        -(obs.y - obs.x.dot(&model.gamma0)) / (1.0 - p + lam)
    })
}

/// Plug-in average effect plus the mean of [`h_ate`].
pub fn delta_ate_mmse(data: &[AteObs], model: &AteModel, eps_n: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(MmseError::InvalidInput("no observations".into()));
    }
    let terms = data
        .iter()
        .map(|o| Ok(model.plug_in(&o.x) + h_ate(o, model, eps_n)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(linalg::mean(&terms))
}

/// Augmented inverse propensity weighting; requires `0 < p(x) < 1`.
pub fn aipw(data: &[AteObs], model: &AteModel) -> Result<f64> {
    let terms = data
        .iter()
        .map(|o| {
            let p = model.p(&o.x)?;
            if p <= 0.0 || p >= 1.0 {
                return Err(MmseError::InvalidInput("AIPW needs overlap".into()));
            }
            let d = o.d as u8 as f64;
            let m1 = o.x.dot(&model.gamma1);
            let m0 = o.x.dot(&model.gamma0);
            Ok(m1 - m0 + d * (o.y - m1) / p - (1.0 - d) * (o.y - m0) / (1.0 - p))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(linalg::mean(&terms))
}

/// Worst-case bias over the covariate sample `xs`:
/// `sqrt(eps) * sqrt(E_X[sigma^2 ((lambda/(p+lambda))^2 + (lambda/(1-p+lambda))^2)])`.
pub fn bias_ate(xs: &[DVector<f64>], model: &AteModel, epsilon: f64, n: usize) -> Result<f64> {
    if xs.is_empty() {
        return Err(MmseError::InvalidInput("no covariates".into()));
    }
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    let lam = lambda(epsilon * n as f64)?;
    let terms = xs
        .iter()
        .map(|x| {
            let p = model.p(x)?;
            let r1 = lam / (p + lam);
            let r0 = lam / (1.0 - p + lam);
            Ok(model.sigma2 * (r1 * r1 + r0 * r0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(epsilon.sqrt() * linalg::mean(&terms).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AteModel {
        AteModel::new(
            Arc::new(|x: &DVector<f64>| if x[1] > 1.0 { 0.0 } else { 0.4 }),
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::from_vec(vec![2.0, -0.5]),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn exact_fit_gives_plug_in() {
        let m = model();
        let data: Vec<AteObs> = (0..10)
            .map(|i| {
                let x = DVector::from_vec(vec![1.0, i as f64 * 0.1]);
                let d = i % 2 == 0;
                let y = x.dot(if d { &m.gamma1 } else { &m.gamma0 });
                AteObs { y, d, x }
            })
            .collect();
        let plug: Vec<f64> = data.iter().map(|o| m.plug_in(&o.x)).collect();
        assert!((delta_ate_mmse(&data, &m, 50.0).unwrap() - linalg::mean(&plug)).abs() < 1e-14);
    }

    #[test]
    fn no_overlap_stays_finite() {
        let m = model();
        let o = AteObs { y: 3.0, d: true, x: DVector::from_vec(vec![1.0, 2.0]) };
        let h = h_ate(&o, &m, 100.0).unwrap();
        assert!((h - (3.0 - 1.0) * 100.0).abs() < 1e-9);
        assert!(aipw(&[o], &m).is_err());
    }

    #[test]
    fn bias_vanishes_as_eps_n_grows() {
        let m = model();
        let xs = vec![DVector::from_vec(vec![1.0, 0.0])];
        let b1 = bias_ate(&xs, &m, 0.01, 100).unwrap();
        let b2 = bias_ate(&xs, &m, 0.01, 10_000).unwrap();
        assert!(b2 < b1);
        assert_eq!(bias_ate(&xs, &m, 0.0, 100).unwrap(), 0.0);
    }
}
