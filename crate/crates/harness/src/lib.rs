//! Monte Carlo experiments and command-line tools built on `mmse-core`.

pub mod cli;
pub mod config;
pub mod curves;
pub mod error;
pub mod linear;
pub mod montecarlo;
pub mod output;
pub mod sweep;
