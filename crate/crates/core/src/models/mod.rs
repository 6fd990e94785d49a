//! Ready-made models with closed-form cross-checks.

pub mod ate;
pub mod gaussian;
pub mod linear_iv;
pub mod probit;
