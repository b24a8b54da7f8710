//! Robust mixtures of Gaussian factor analyzers: trimmed, constrained AECM
//! estimation, contamination scenarios and evaluation helpers.

pub mod aecm;
pub mod constraints;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod model;
pub mod rng;

pub use aecm::{classify_trimmed, fit, fit_from, fit_once, kept_count, FitConfig, FitResult};
pub use error::{Error, Result};
pub use model::{ConstraintBounds, DataMatrix, MfaParams};
