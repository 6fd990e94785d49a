//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 for invalid flags or configuration, 2 when a
//! run fails.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mmse_core::calibration::epsilon_semiparam;
use mmse_core::exec;

use crate::config::ExperimentConfig;
use crate::curves::run_bias_curves;
use crate::error::{HarnessError, Result};
use crate::linear::{self, LinearSetup};
use crate::montecarlo::run_montecarlo;
use crate::output::{self, fmt_f64, Manifest};
use crate::sweep::run_misspec_sweep;

#[derive(Debug, Parser)]
#[command(name = "mmse", version, about = "Minimum-MSE estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Configuration file (flat key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output CSV; a manifest is written next to it. Without it the table goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DesignFlags {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "t")]
    pub t: Option<usize>,
    #[arg(long = "s")]
    pub s: Option<usize>,
    #[arg(long = "r")]
    pub r: Option<usize>,
    /// Comma-separated detection-error probabilities.
    #[arg(long)]
    pub p: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Neighborhood size from a detection-error probability.
    Calibrate {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        n: usize,
        #[arg(long = "lambda-max", default_value_t = 1.0)]
        lambda_max: f64,
        #[command(flatten)]
        common: Common,
    },
    /// One-step estimates for the linear model on a CSV data set.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "p")]
        epsilon: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        mu: f64,
    },
    /// Monte Carlo experiment for the dynamic probit.
    Mc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        design: DesignFlags,
    },
    /// Worst-case bias and MSE over a grid of panel lengths.
    Biascurve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        design: DesignFlags,
    },
    /// Monte Carlo over a grid of mean shifts of the random effects.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        design: DesignFlags,
    },
}

fn load_config(common: &Common, design: &DesignFlags) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let flag = |field: &str, m: String| HarnessError::Validation(format!("--{field}: {m}"));
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = design.n {
        cfg.n = v;
    }
    if let Some(v) = design.t {
        cfg.t = v;
    }
    if let Some(v) = design.s {
        cfg.s = v;
    }
    if let Some(v) = design.r {
        cfg.r = v;
    }
    if let Some(v) = &design.p {
        cfg.set("p", v).map_err(|m| flag("p", m))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(common: &Common, cfg_out: Option<&String>) -> Option<PathBuf> {
    common.out.clone().or_else(|| cfg_out.map(PathBuf::from))
}

/// Writes the main table (and extra files) or prints it to `stdout`.
fn emit(
    stdout: &mut dyn Write,
    path: Option<&Path>,
    table: &[u8],
    extra: &[(&str, Vec<u8>)],
    mut manifest: Manifest,
) -> Result<()> {
    match path {
        None => stdout.write_all(table).map_err(|e| HarnessError::io("stdout", e)),
        Some(p) => {
            output::write_file(p, table)?;
            manifest.add_output(p, table);
            for (suffix, bytes) in extra {
                let q = output::sibling(p, suffix);
                output::write_file(&q, bytes)?;
                manifest.add_output(&q, bytes);
            }
            output::write_file(&output::sibling(p, "manifest.txt"), manifest.render().as_bytes())
        }
    }
}

fn run_command(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Calibrate { p, n, lambda_max, common } => {
            let r = epsilon_semiparam(p, n, lambda_max).map_err(|e| HarnessError::Validation(e.to_string()))?;
            writeln!(stdout, "epsilon={:.6}", r.epsilon).map_err(|e| HarnessError::io("stdout", e))?;
            if let Some(path) = &common.out {
                let table = format!("p,n,lambda_max,epsilon\n{},{},{},{}\n", fmt_f64(p), n, fmt_f64(lambda_max), fmt_f64(r.epsilon));
                let manifest = Manifest {
                    subcommand: "calibrate".into(),
                    config_text: format!("p = {p:?}\nn = {n}\nlambda_max = {lambda_max:?}\n"),
                    threads: common.threads,
                    ..Manifest::default()
                };
                emit(stdout, Some(path), table.as_bytes(), &[], manifest)?;
            }
            Ok(())
        }
        Command::Estimate { common, data, epsilon, p, mu } => {
            let cfg_path = common
                .config
                .as_ref()
                .ok_or_else(|| HarnessError::Validation("estimate needs --config with the linear model".into()))?;
            let setup = LinearSetup::from_file(cfg_path)?;
            let obs = linear::read_data(&data, &setup.model)?;
            let eps = match (epsilon, p) {
                (Some(e), _) if e >= 0.0 => e,
                (Some(e), _) => return Err(HarnessError::Validation(format!("--epsilon must be >= 0, got {e}"))),
                (None, Some(p)) => setup.calibrate(p, obs.len()).map_err(|e| HarnessError::Validation(e.to_string()))?.epsilon,
                (None, None) => return Err(HarnessError::Validation("give --epsilon or --p".into())),
            };
            let est = linear::estimate(&setup, &obs, eps, p, mu)?;
            let r = &est.report;
            let header = "epsilon,n,point,closed_form_point,ols_one_step,iv_one_step,bias_bound,sd_h,ci_lo,ci_hi,ci_ak_lo,ci_ak_hi\n";
            let row = [
                fmt_f64(eps),
                r.n.to_string(),
                fmt_f64(r.point),
                fmt_f64(est.closed_form_point),
                fmt_f64(est.ols_one_step),
                est.iv_one_step.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.bias_bound),
                fmt_f64(r.sd_h),
                fmt_f64(r.ci_robust.0),
                fmt_f64(r.ci_robust.1),
                fmt_f64(r.ci_ak.0),
                fmt_f64(r.ci_ak.1),
            ]
            .join(",");
            let table = format!("{header}{row}\n");
            let manifest = Manifest {
                subcommand: "estimate".into(),
                config_text: setup.text.clone(),
                threads: common.threads,
                notes: vec![("data".into(), data.display().to_string())],
                ..Manifest::default()
            };
            emit(stdout, common.out.as_deref(), table.as_bytes(), &[], manifest)
        }
        Command::Mc { common, design } => {
            let cfg = load_config(&common, &design)?;
            let res = run_montecarlo(&cfg)?;
            let table = output::mc_csv(&res, cfg.t, &format!("{:?}", cfg.dgp_at(cfg.nu)), cfg.nu)?;
            let reps = output::replications_csv(&res.replications)?;
            let manifest = Manifest {
                subcommand: "mc".into(),
                config_text: cfg.canonical(),
                seed: cfg.seed,
                threads: common.threads,
                notes: vec![
                    ("runtime_secs".into(), format!("{:.3}", res.runtime_secs)),
                    ("failed_replications".into(), res.failures.len().to_string()),
                ],
                ..Manifest::default()
            };
            emit(stdout, out_path(&common, cfg.out.as_ref()).as_deref(), &table, &[("reps.csv", reps)], manifest)
        }
        Command::Biascurve { common, design } => {
            let cfg = load_config(&common, &design)?;
            let rows = run_bias_curves(&cfg)?;
            let table = output::curves_csv(&rows)?;
            let manifest =
                Manifest { subcommand: "biascurve".into(), config_text: cfg.canonical(), seed: cfg.seed, threads: common.threads, ..Manifest::default() };
            emit(stdout, out_path(&common, cfg.out.as_ref()).as_deref(), &table, &[], manifest)
        }
        Command::Sweep { common, design } => {
            let cfg = load_config(&common, &design)?;
            let rows = run_misspec_sweep(&cfg)?;
            let table = output::sweep_csv(&rows)?;
            let manifest =
                Manifest { subcommand: "sweep".into(), config_text: cfg.canonical(), seed: cfg.seed, threads: common.threads, ..Manifest::default() };
            emit(stdout, out_path(&common, cfg.out.as_ref()).as_deref(), &table, &[], manifest)
        }
    }
}

fn threads_of(cmd: &Command) -> usize {
    match cmd {
        Command::Calibrate { common, .. }
        | Command::Estimate { common, .. }
        | Command::Mc { common, .. }
        | Command::Biascurve { common, .. }
        | Command::Sweep { common, .. } => common.threads,
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(stderr, "{e}");
            return code;
        }
    };
    let threads = threads_of(&cli.command);
    match exec::with_threads(threads, || run_command(cli.command, stdout)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
