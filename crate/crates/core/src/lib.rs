//! Two-stage knee osteoarthritis grading on the Kellgren-Lawrence scale.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`tensor`] / [`nn`]: `f64` tensors with reverse-mode differentiation and
//!   the convolutional building blocks,
//! * [`optim`]: Adam, early stopping and multi-restart model selection,
//! * [`phantom`]: a deterministic synthetic radiograph generator with
//!   simulated readers,
//! * [`curate`]: manifest exclusion rules, grade mapping and patient splits,
//! * [`preprocess`]: resampling, bit-depth conversion, normalization,
//!   cropping and augmentation,
//! * [`detect`]: a grid-proposal joint-center detector and IoU evaluation,
//! * [`classify`]: multi-input (PA + LAT) and single-view KL classifiers,
//! * [`evalstats`]: accuracy, confusion matrices and the kappa family.

pub mod classify;
pub mod curate;
pub mod detect;
pub mod error;
pub mod evalstats;
pub mod model_io;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Tensor, Var};
