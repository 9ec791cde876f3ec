//! Foreground-aware encoder-decoder image harmonization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense rank-4 tensors and a small reverse-mode tape.
//! - [`model`]: the encoder-decoder with mask-fusion backbone stem and blend head.
//! - [`objectives`] and [`metrics`]: training losses and the evaluation protocol.
//! - [`data`]: composite synthesis, dataset I/O and augmentation.
//! - [`train`]: Adam, learning-rate schedule, training loop, checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
