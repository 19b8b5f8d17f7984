//! Matrix factorisation ranking engine for implicit feedback.
//!
//! Trains user/item factors by stochastic gradient descent on smooth
//! surrogates of the (local) AUC, with popularity-aware item sampling,
//! averaged iterates, and a conflict-free block-parallel trainer. Includes
//! ranking metrics, synthetic benchmark generators, grid-search model
//! selection and data-dependent generalisation diagnostics.

pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod parallel;
pub mod ratings;
pub mod rng;
pub mod synthetic;
mod sweep;
pub mod tuning;

pub use error::{Error, Result};
pub use losses::{LossKind, LossSpec, WeightKind, WeightSpec};
pub use model::FactorModel;
pub use optimizer::{TrainConfig, TrainMode, TrainReport};
pub use ratings::ImplicitRatings;
