//! CSV tables and run manifests.
//!
//! Floats are written with 17 significant digits; missing values are empty
//! fields.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::curves::CurveRow;
use crate::error::{HarnessError, Result};
use crate::montecarlo::{McResult, Replication};
use crate::sweep::SweepRow;

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| HarnessError::io("csv buffer", e.into_error()))
}

pub const MC_HEADER: &[&str] = &[
    "T", "dgp", "nu", "estimator", "quantity", "truth", "reps", "failures", "mean", "bias", "bias_se", "variance",
    "mse_x1000", "mse_se_x1000", "p2_5", "p97_5", "coverage", "coverage_ak", "width_robust", "width_ak",
    "mean_bias_bound",
];

pub fn mc_csv(res: &McResult, t: usize, dgp: &str, nu: f64) -> Result<Vec<u8>> {
    let rows = res
        .summaries
        .iter()
        .map(|s| {
            vec![
                t.to_string(),
                dgp.to_string(),
                fmt_f64(nu),
                s.estimator.clone(),
                s.quantity.name().to_string(),
                fmt_f64(s.truth),
                s.reps.to_string(),
                res.failures.len().to_string(),
                fmt_f64(s.mean),
                fmt_f64(s.bias),
                fmt_f64(s.bias_se),
                fmt_f64(s.variance),
                fmt_f64(s.mse * 1000.0),
                fmt_f64(s.mse_se * 1000.0),
                fmt_f64(s.p2_5),
                fmt_f64(s.p97_5),
                opt(s.coverage),
                opt(s.coverage_ak),
                opt(s.width_robust),
                opt(s.width_ak),
                opt(s.mean_bias_bound),
            ]
        })
        .collect();
    to_bytes(MC_HEADER, rows)
}

pub const REPS_HEADER: &[&str] = &["rep", "data_hash", "beta_hat", "estimator", "quantity", "point", "ci_lo", "ci_hi"];

pub fn replications_csv(reps: &[Replication]) -> Result<Vec<u8>> {
    let rows = reps
        .iter()
        .flat_map(|r| {
            r.estimates.iter().map(move |e| {
                vec![
                    r.index.to_string(),
                    r.data_hash.clone(),
                    fmt_f64(r.beta_hat),
                    e.estimator.clone(),
                    e.quantity.name().to_string(),
                    fmt_f64(e.point),
                    opt(e.ci_robust.map(|c| c.0)),
                    opt(e.ci_robust.map(|c| c.1)),
                ]
            })
        })
        .collect();
    to_bytes(REPS_HEADER, rows)
}

pub const CURVE_HEADER: &[&str] = &["T", "p", "epsilon", "estimator", "bias", "bias_se", "variance", "mse"];

pub fn curves_csv(rows: &[CurveRow]) -> Result<Vec<u8>> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                fmt_f64(r.p),
                fmt_f64(r.epsilon),
                r.estimator.clone(),
                fmt_f64(r.bias),
                opt(r.bias_se),
                fmt_f64(r.variance),
                fmt_f64(r.mse),
            ]
        })
        .collect();
    to_bytes(CURVE_HEADER, rows)
}

pub const SWEEP_HEADER: &[&str] =
    &["nu", "twice_kl", "estimator", "quantity", "truth", "mean", "p2_5", "p97_5", "bias", "mse_x1000"];

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.nu),
                fmt_f64(r.twice_kl),
                r.estimator.clone(),
                r.quantity.name().to_string(),
                fmt_f64(r.truth),
                fmt_f64(r.mean),
                fmt_f64(r.p2_5),
                fmt_f64(r.p97_5),
                fmt_f64(r.bias),
                fmt_f64(r.mse * 1000.0),
            ]
        })
        .collect();
    to_bytes(SWEEP_HEADER, rows)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path.display().to_string(), e))
}

/// `dir/stem.suffix` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Plain-text record of a run.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub subcommand: String,
    pub config_text: String,
    pub seed: u64,
    pub threads: usize,
    pub outputs: Vec<(PathBuf, String)>,
    pub notes: Vec<(String, String)>,
}

impl Manifest {
    pub fn add_output(&mut self, path: &Path, bytes: &[u8]) {
        self.outputs.push((path.to_path_buf(), sha256_hex(bytes)));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tool = mmse {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "subcommand = {}", self.subcommand);
        let _ = writeln!(s, "config_sha256 = {}", sha256_hex(self.config_text.as_bytes()));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "parallel_feature = {}", mmse_core::exec::parallel_enabled());
        for (k, v) in &self.notes {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(s, "output = {} sha256={h}", p.display());
        }
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config_text);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123_456_789.123_456_78] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("a/b.csv"), "manifest.txt"), PathBuf::from("a/b.manifest.txt"));
    }
}
