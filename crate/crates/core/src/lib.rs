//! Post-hoc calibration of multi-class classifiers with a kernel density
//! estimate over a learned low-dimensional projection of penultimate-layer
//! embeddings.
//!
//! The pipeline is:
//!
//! 1. [`trainer::train_projection`] fits the projection on training embeddings
//!    using stratified background sampling and the KDE log-loss.
//! 2. [`bandwidth::tune_bandwidth`] picks the inference bandwidth on the
//!    calibration set by golden-section search over the leave-one-out log-loss.
//! 3. [`kde::KdeModel::predict`] turns query embeddings into probability
//!    vectors on the simplex.
//! 4. [`metrics`] scores the result (ECE, class-wise ECE, Brier, NLL).
//!
//! [`synth`] provides Gaussian mixtures with an exact posterior for checking
//! calibration against ground truth, and [`temperature`] the temperature
//! scaling baseline.

pub mod bandwidth;
pub mod dataio;
pub mod error;
pub mod kde;
pub mod kernel;
pub mod math;
pub mod metrics;
pub mod projection;
pub mod synth;
pub mod temperature;
pub mod trainer;

pub use error::{KcalError, Result};
pub use kde::{KdeModel, ProbMatrix};
pub use projection::{Arch, ProjectionParams};
