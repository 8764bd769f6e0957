//! Document image unwarping, desk-scale and fully testable.
//!
//! Two training stages on a small hand-built reverse-mode autodiff core:
//! masked-patch reconstruction pretraining on background-excluded pages,
//! then fine-tuning a dense-flow rectifier that unwarps documents by
//! bilinear resampling. Ships with a procedural distorted-document
//! generator, evaluation metrics, and a five-command pipeline CLI.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each one exercises a major capability end to end.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod mae;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patch;
pub mod rectifier;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
