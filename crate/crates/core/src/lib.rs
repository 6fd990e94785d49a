//! Minimum-MSE estimation under local misspecification.
//!
//! The crate provides three engines that map a reference model and a
//! neighborhood size to an influence function `h`, plus calibration of the
//! neighborhood size from a detection-error probability and robust
//! confidence intervals:
//!
//! - [`parametric`]: parametric reference model inside a parametric family.
//! - [`gmm`]: moment-based reference model.
//! - [`semiparam`]: mixture models with a misspecified latent distribution.
//!
//! Work over observations or simulation draws runs on rayon when the
//! `parallel` feature is enabled and sequentially otherwise. Results are
//! identical in both modes.

pub mod calibration;
pub mod error;
pub mod exec;
pub mod gmm;
pub mod inference;
pub mod linalg;
pub mod models;
pub mod neighborhoods;
pub mod normal;
pub mod numdiff;
pub mod parametric;
pub mod rng;
pub mod semiparam;

pub use calibration::{epsilon_parametric, epsilon_semiparam, CalibrationResult};
pub use error::{MmseError, Result};
pub use inference::EstimateReport;
pub use neighborhoods::{Distance, NeighborhoodSpec, WeightedEuclidean};
pub use parametric::{ReferenceModel, ScoreHessianBundle};
pub use semiparam::{MixtureModel, SimulationPanel};
