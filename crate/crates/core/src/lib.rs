//! Evidential deep segmentation.
//!
//! The network emits per-pixel evidence through a softplus head; evidence
//! parameterises a Dirichlet per pixel, which subjective logic turns into
//! belief masses and a single uncertainty mass. Training combines an
//! integrated cross-entropy, a KL regulariser towards the uniform Dirichlet,
//! soft Dice and a calibrated uncertainty penalty. Evaluation covers Dice,
//! ASSD, ECE and uncertainty-error overlap, and [`uaf`] rejects test images
//! whose mean uncertainty exceeds a threshold learned on validation data.

pub mod backbone;
pub mod datagen;
pub mod error;
pub mod evidential;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod uaf;

pub use error::{Error, Result};
pub use tensor::Tensor;
