//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored; lists are
//! comma-separated. Unknown keys and malformed values are reported with
//! their line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use mmse_core::models::probit::{Dgp, DynProbitModel};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    Reference,
    LogNormal,
    Shifted,
}

impl FromStr for DgpKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reference" | "normal" => Ok(DgpKind::Reference),
            "lognormal" => Ok(DgpKind::LogNormal),
            "shifted" => Ok(DgpKind::Shifted),
            other => Err(format!("unknown dgp `{other}` (reference, lognormal, shifted)")),
        }
    }
}

impl DgpKind {
    fn name(&self) -> &'static str {
        match self {
            DgpKind::Reference => "reference",
            DgpKind::LogNormal => "lognormal",
            DgpKind::Shifted => "shifted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EstimatorKind {
    RandomEffects,
    EmpiricalBayes,
    LinearProbability,
    MaximumLikelihood,
    MinimumMse,
}

impl FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "RE" => Ok(EstimatorKind::RandomEffects),
            "EB" => Ok(EstimatorKind::EmpiricalBayes),
            "LP" => Ok(EstimatorKind::LinearProbability),
            "MLE" => Ok(EstimatorKind::MaximumLikelihood),
            "MMSE" => Ok(EstimatorKind::MinimumMse),
            _ => Err(format!("unknown estimator `{s}` (RE, EB, LP, MLE, MMSE)")),
        }
    }
}

impl EstimatorKind {
    pub fn short(&self) -> &'static str {
        match self {
            EstimatorKind::RandomEffects => "RE",
            EstimatorKind::EmpiricalBayes => "EB",
            EstimatorKind::LinearProbability => "LP",
            EstimatorKind::MaximumLikelihood => "MLE",
            EstimatorKind::MinimumMse => "MMSE",
        }
    }
}

/// Probit experiment settings. Defaults reproduce the `T = 5` log-normal design.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub beta: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub t: usize,
    pub t_grid: Vec<usize>,
    pub dgp: DgpKind,
    pub nu: f64,
    pub nu_grid: Vec<f64>,
    pub n: usize,
    pub s: usize,
    pub r: usize,
    pub p: Vec<f64>,
    pub mu: f64,
    pub estimators: Vec<EstimatorKind>,
    pub estimate_beta: bool,
    /// Eigenvalue used to calibrate epsilon from `p`.
    pub lambda_max: f64,
    /// Initial condition used by the bias curves.
    pub curve_y0: u8,
    pub seed: u64,
    pub max_failure_rate: f64,
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            mu1: -0.25,
            mu2: 0.5,
            sigma: 0.8,
            t: 5,
            t_grid: vec![1, 5, 10, 20, 50],
            dgp: DgpKind::LogNormal,
            nu: 0.0,
            nu_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            n: 500,
            s: 1000,
            r: 200,
            p: vec![0.01, 1e-10],
            mu: 0.05,
            estimators: vec![
                EstimatorKind::RandomEffects,
                EstimatorKind::EmpiricalBayes,
                EstimatorKind::LinearProbability,
                EstimatorKind::MaximumLikelihood,
                EstimatorKind::MinimumMse,
            ],
            estimate_beta: true,
            lambda_max: 1.0,
            curve_y0: 0,
            seed: 20_240_601,
            max_failure_rate: 0.05,
            out: None,
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn parse_one<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub const KEYS: &[&str] = &[
    "beta", "mu1", "mu2", "sigma", "T", "t_grid", "dgp", "nu", "nu_grid", "n", "S", "R", "p", "mu", "estimators",
    "estimate_beta", "lambda_max", "curve_y0", "seed", "max_failure_rate", "out",
];

impl ExperimentConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "beta" => self.beta = parse_one(value)?,
            "mu1" => self.mu1 = parse_one(value)?,
            "mu2" => self.mu2 = parse_one(value)?,
            "sigma" => self.sigma = parse_one(value)?,
            "T" => self.t = parse_one(value)?,
            "t_grid" => self.t_grid = parse_list(value)?,
            "dgp" => self.dgp = parse_one(value)?,
            "nu" => self.nu = parse_one(value)?,
            "nu_grid" => self.nu_grid = parse_list(value)?,
            "n" => self.n = parse_one(value)?,
            "S" => self.s = parse_one(value)?,
            "R" => self.r = parse_one(value)?,
            "p" => self.p = parse_list(value)?,
            "mu" => self.mu = parse_one(value)?,
            "estimators" => self.estimators = parse_list(value)?,
            "estimate_beta" => self.estimate_beta = parse_one(value)?,
            "lambda_max" => self.lambda_max = parse_one(value)?,
            "curve_y0" => self.curve_y0 = parse_one(value)?,
            "seed" => self.seed = parse_one(value)?,
            "max_failure_rate" => self.max_failure_rate = parse_one(value)?,
            "out" => self.out = Some(value.to_string()),
            _ => return Err(format!("unknown key (expected one of {})", KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(HarnessError::Config {
                    path: path.into(),
                    line: i + 1,
                    field: line.into(),
                    message: "expected `key = value`".into(),
                });
            };
            let (k, v) = (k.trim(), v.split('#').next().unwrap_or("").trim());
            cfg.set(k, v).map_err(|message| HarnessError::Config {
                path: path.into(),
                line: i + 1,
                field: k.into(),
                message,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Validation(m));
        if self.r < 1 {
            return fail("R must be >= 1".into());
        }
        if self.n < 1 {
            return fail("n must be >= 1".into());
        }
        if self.s < 2 {
            return fail("S must be >= 2".into());
        }
        if !(self.sigma > 0.0) {
            return fail("sigma must be positive".into());
        }
        if self.t < 1 || self.t_grid.iter().any(|&t| t < 1) {
            return fail("T must be >= 1".into());
        }
        if self.p.is_empty() || self.p.iter().any(|&p| !(p > 0.0 && p <= 0.5)) {
            return fail("every p must lie in (0, 0.5]".into());
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return fail("mu must lie in (0, 1)".into());
        }
        if !(self.lambda_max > 0.0) {
            return fail("lambda_max must be positive".into());
        }
        if self.curve_y0 > 1 {
            return fail("curve_y0 must be 0 or 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return fail("max_failure_rate must lie in [0, 1]".into());
        }
        if self.estimators.is_empty() {
            return fail("no estimators selected".into());
        }
        Ok(())
    }

    pub fn model(&self, t: usize) -> Result<DynProbitModel> {
        Ok(DynProbitModel::new(self.beta, self.mu1, self.mu2, self.sigma, t)?)
    }

    pub fn dgp_at(&self, nu: f64) -> Dgp {
        match self.dgp {
            DgpKind::Reference => Dgp::Reference,
            DgpKind::LogNormal => Dgp::LogNormal,
            DgpKind::Shifted => Dgp::Shifted(nu),
        }
    }

    pub fn has(&self, e: EstimatorKind) -> bool {
        self.estimators.contains(&e)
    }

    /// Canonical text form; its hash identifies a run.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let est: Vec<&str> = self.estimators.iter().map(EstimatorKind::short).collect();
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "mu1 = {:?}", self.mu1);
        let _ = writeln!(s, "mu2 = {:?}", self.mu2);
        let _ = writeln!(s, "sigma = {:?}", self.sigma);
        let _ = writeln!(s, "T = {}", self.t);
        let _ = writeln!(s, "t_grid = {}", join(&self.t_grid));
        let _ = writeln!(s, "dgp = {}", self.dgp.name());
        let _ = writeln!(s, "nu = {:?}", self.nu);
        let _ = writeln!(s, "nu_grid = {}", self.nu_grid.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "S = {}", self.s);
        let _ = writeln!(s, "R = {}", self.r);
        let _ = writeln!(s, "p = {}", self.p.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "mu = {:?}", self.mu);
        let _ = writeln!(s, "estimators = {}", est.join(","));
        let _ = writeln!(s, "estimate_beta = {}", self.estimate_beta);
        let _ = writeln!(s, "lambda_max = {:?}", self.lambda_max);
        let _ = writeln!(s, "curve_y0 = {}", self.curve_y0);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "max_failure_rate = {:?}", self.max_failure_rate);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# comment\nT = 10\np = 0.01, 1e-10\nestimators = re,mmse\ndgp = shifted # trailing\nnu_grid = 0,0.5\n";
        let cfg = ExperimentConfig::parse(text, "x.cfg").unwrap();
        assert_eq!(cfg.t, 10);
        assert_eq!(cfg.p, vec![0.01, 1e-10]);
        assert_eq!(cfg.estimators, vec![EstimatorKind::RandomEffects, EstimatorKind::MinimumMse]);
        assert_eq!(cfg.dgp, DgpKind::Shifted);
        let again = ExperimentConfig::parse(&cfg.canonical(), "y.cfg").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn reports_line_and_field() {
        let err = ExperimentConfig::parse("n = 500\nS = many\n", "bad.cfg").unwrap_err();
        match &err {
            HarnessError::Config { line, field, .. } => assert_eq!((*line, field.as_str()), (2, "S")),
            other => panic!("{other}"),
        }
        assert_eq!(err.exit_code(), 1);
        assert!(matches!(ExperimentConfig::parse("bogus = 1", "b.cfg"), Err(HarnessError::Config { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("just text", "b.cfg"), Err(HarnessError::Config { line: 1, .. })));
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.r = 0;
        assert!(matches!(cfg.validate(), Err(HarnessError::Validation(_))));
    }
}
