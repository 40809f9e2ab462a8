//! Low-rank zeroth-order optimization.
//!
//! Estimators ([`estimators`]) build gradient surrogates from loss values only.
//! The optimizers ([`optimizers`]) use the low-rank estimator with lazily
//! resampled right factors, with or without projected momentum.

pub mod bench;
pub mod error;
pub mod estimators;
pub mod optimizers;
pub mod problems;
pub mod rng;
pub mod subspace;
pub mod tensor;

pub use error::{Error, Result};
pub use problems::LossOracle;
pub use rng::{SamplerKind, Seed};
pub use tensor::{LayerShape, Matrix, ParamSet};
