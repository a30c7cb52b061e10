//! FairDCL: fairness-aware contrastive pre-training for dense visual
//! representations, with multi-level mutual-information de-biasing,
//! downstream segmentation fine-tuning and group-parity evaluation.

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod mi;
pub mod nn;
pub mod plot;
pub mod probe;
pub mod report;
pub mod rng;
pub mod seg;
pub mod train;

pub use error::{FairdclError, Result};
