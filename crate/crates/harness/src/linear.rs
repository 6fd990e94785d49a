//! One-step estimates for the linear model on a CSV data set.
//!
//! Data columns are `y`, `x1..xK` and `z1..zL`. The model file uses the same
//! flat `key = value` format as experiment configs, with matrices given
//! row-major as comma lists:
//!
//! ```text
//! pi = 1.0, 0.2, 0.1, 0.8     # K x L
//! sigma_v = 1.0, 0.3, 0.3, 1.0
//! sigma_z = 1.0, 0.0, 0.0, 1.0
//! sigma2 = 1.0
//! c = 1.0, 0.0
//! omega_rho = 1.0, 0.0, 0.0, 1.0   # optional, identity by default
//! ```

use std::path::Path;

use mmse_core::calibration::CalibrationResult;
use mmse_core::inference::EstimateReport;
use mmse_core::linalg;
use mmse_core::models::linear_iv::{epsilon_linear, h_linear, h_linear_iv_limit, LinearIvModel, LinearObs};
use mmse_core::neighborhoods::NeighborhoodSpec;
use mmse_core::parametric::{project, ParametricPlan, ReferenceModel, ScoreHessianBundle};
use nalgebra::{DMatrix, DVector};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone)]
pub struct LinearSetup {
    pub model: LinearIvModel,
    pub omega_rho: DMatrix<f64>,
    pub text: String,
}

fn square(v: &[f64], what: &str) -> std::result::Result<DMatrix<f64>, String> {
    let k = (v.len() as f64).sqrt().round() as usize;
    if k * k != v.len() {
        return Err(format!("{what} needs a square number of entries, got {}", v.len()));
    }
    Ok(DMatrix::from_row_slice(k, k, v))
}

impl LinearSetup {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut vals: std::collections::BTreeMap<String, (usize, Vec<f64>)> = Default::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |field: &str, message: String| HarnessError::Config {
                path: path.into(),
                line: i + 1,
                field: field.into(),
                message,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(line, "expected `key = value`".into()))?;
            let k = k.trim();
            if !["pi", "sigma_v", "sigma_z", "sigma2", "c", "omega_rho"].contains(&k) {
                return Err(err(k, "unknown key (pi, sigma_v, sigma_z, sigma2, c, omega_rho)".into()));
            }
            let nums = v
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| err(k, format!("`{}`: {e}", s.trim()))))
                .collect::<Result<Vec<f64>>>()?;
            vals.insert(k.to_string(), (i + 1, nums));
        }
        let get = |k: &str| -> Result<&(usize, Vec<f64>)> {
            vals.get(k).ok_or_else(|| HarnessError::Validation(format!("{path}: missing key `{k}`")))
        };
        let at = |k: &str, m: String| HarnessError::Config {
            path: path.into(),
            line: vals.get(k).map_or(0, |v| v.0),
            field: k.into(),
            message: m,
        };
        let c = DVector::from_vec(get("c")?.1.clone());
        let kx = c.len();
        let pi_v = &get("pi")?.1;
        if pi_v.is_empty() || pi_v.len() % kx != 0 {
            return Err(at("pi", format!("expected a multiple of {kx} entries")));
        }
        let pi = DMatrix::from_row_slice(kx, pi_v.len() / kx, pi_v);
        let sigma_v = square(&get("sigma_v")?.1, "sigma_v").map_err(|m| at("sigma_v", m))?;
        let sigma_z = square(&get("sigma_z")?.1, "sigma_z").map_err(|m| at("sigma_z", m))?;
        let sigma2 = match get("sigma2")?.1.as_slice() {
            [s] => *s,
            _ => return Err(at("sigma2", "expected one number".into())),
        };
        let omega_rho = match vals.get("omega_rho") {
            Some((_, v)) => square(v, "omega_rho").map_err(|m| at("omega_rho", m))?,
            None => DMatrix::identity(kx, kx),
        };
        let model = LinearIvModel::new(pi, sigma_v, sigma_z, sigma2, c).map_err(|e| HarnessError::Validation(e.to_string()))?;
        if omega_rho.nrows() != kx {
            return Err(at("omega_rho", format!("expected {kx} x {kx}")));
        }
        Ok(Self { model, omega_rho, text: text.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn calibrate(&self, p: f64, n: usize) -> Result<CalibrationResult> {
        Ok(epsilon_linear(p, n, &self.model, &self.omega_rho)?)
    }
}

pub fn read_data(path: &Path, model: &LinearIvModel) -> Result<Vec<LinearObs>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let missing = |name: String| HarnessError::Validation(format!("{}: missing column `{name}`", path.display()));
    let y_col = col("y").ok_or_else(|| missing("y".into()))?;
    let x_cols = (1..=model.dim_x()).map(|i| col(&format!("x{i}")).ok_or_else(|| missing(format!("x{i}")))).collect::<Result<Vec<_>>>()?;
    let z_cols = (1..=model.dim_z()).map(|i| col(&format!("z{i}")).ok_or_else(|| missing(format!("z{i}")))).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).unwrap_or("").trim().parse::<f64>().map_err(|e| HarnessError::Config {
                path: path.display().to_string(),
                line: line + 2,
                field: header.get(c).unwrap_or("?").to_string(),
                message: e.to_string(),
            })
        };
        out.push(LinearObs {
            y: num(y_col)?,
            x: DVector::from_iterator(x_cols.len(), x_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?),
            z: DVector::from_iterator(z_cols.len(), z_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?),
        });
    }
    if out.is_empty() {
        return Err(HarnessError::Validation(format!("{}: no observations", path.display())));
    }
    Ok(out)
}

/// OLS of `y` on `x` without intercept.
pub fn ols(data: &[LinearObs]) -> Result<DVector<f64>> {
    let k = data[0].x.len();
    let mut xx = DMatrix::zeros(k, k);
    let mut xy = DVector::zeros(k);
    for o in data {
        xx += &o.x * o.x.transpose();
        xy += &o.x * o.y;
    }
    Ok(linalg::spd_solve_vec(&xx, &xy, "X'X")?)
}

#[derive(Debug, Clone)]
pub struct LinearEstimate {
    pub beta_ols: DVector<f64>,
    pub report: EstimateReport,
    /// Same point computed from the closed-form influence function.
    pub closed_form_point: f64,
    pub ols_one_step: f64,
    pub iv_one_step: Option<f64>,
}

/// `c'beta_ols + mean h(Y_i)` with `h` from the likelihood engine.
pub fn estimate(setup: &LinearSetup, data: &[LinearObs], epsilon: f64, p: Option<f64>, mu: f64) -> Result<LinearEstimate> {
    let model = &setup.model;
    let n = data.len();
    let beta = ols(data)?;
    let theta = model.theta_of_eta(&beta);
    let bundle = ScoreHessianBundle::from_parts(
        beta.clone(),
        theta.clone(),
        ReferenceModel::delta(model, &theta),
        model.information(),
        model.jacobian_eta(&beta),
        model.grad_theta_delta(&theta),
    )?;
    let projected = project(&bundle)?;
    let omega = LinearIvModel::block_omega(&DMatrix::identity(model.dim_x(), model.dim_x()), &setup.omega_rho)?;
    let spec = NeighborhoodSpec::euclidean(omega, epsilon, n)?;
    let plan = ParametricPlan::new(&bundle, &projected, &spec)?;
    let h: Vec<f64> = data.iter().map(|o| plan.h(model, o, &theta)).collect();
    let base = bundle.delta;
    let point = base + linalg::mean(&h);
    let report = EstimateReport::new("MMSE", point, plan.bias, linalg::sample_sd(&h), n, epsilon, p, mu)?;
    let closed: Vec<f64> = data.iter().map(|o| h_linear(o, &beta, model, &setup.omega_rho, spec.eps_n())).collect::<mmse_core::Result<_>>()?;
    let ols_h: Vec<f64> = data.iter().map(|o| h_linear(o, &beta, model, &setup.omega_rho, 0.0)).collect::<mmse_core::Result<_>>()?;
    let iv_h: Option<Vec<f64>> = data.iter().map(|o| h_linear_iv_limit(o, &beta, model).ok()).collect();
    Ok(LinearEstimate {
        closed_form_point: base + linalg::mean(&closed),
        ols_one_step: base + linalg::mean(&ols_h),
        iv_one_step: iv_h.map(|v| base + linalg::mean(&v)),
        beta_ols: beta,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_lines() {
        let text = "c = 1, 0\npi = 1, 0, 0, 1\nsigma_v = 1, 0, 0\nsigma_z = 1,0,0,1\nsigma2 = 1\n";
        match LinearSetup::parse(text, "m.cfg") {
            Err(HarnessError::Config { line, field, .. }) => assert_eq!((line, field.as_str()), (3, "sigma_v")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(LinearSetup::parse("c = 1\nfoo = 2\n", "m.cfg"), Err(HarnessError::Config { line: 2, .. })));
    }
}
