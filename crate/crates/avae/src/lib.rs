//! Experiment harness for the affine VAE: MNIST files, checkpoints, CSV
//! outputs and the commands behind the `avae` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
