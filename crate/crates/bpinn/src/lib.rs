//! Bayesian physics-informed neural networks for linear imaging inverse
//! problems (BPINN-IP): matrix-free forward operators for infrared
//! deblurring and super-resolution, closed-form linear-Gaussian posteriors,
//! a compact neural-network engine with a three-term Bayesian loss, and
//! Monte-Carlo-dropout uncertainty quantification.

pub mod bayes;
pub mod config;
pub mod datagen;
pub mod error;
pub mod field;
pub mod io;
pub mod neural;
pub mod rng;
pub mod training;
pub mod uq;

pub use error::{Error, Result};
pub use field::{Field, ForwardOperator};
