//! Affine variational autoencoder core.
//!
//! A convolutional VAE wrapped in two differentiable affine layers: the first
//! warps the input towards the pose the VAE was trained on, the second warps
//! the reconstruction back. The affine parameters are fitted per sample by
//! gradient descent on the VAE loss, optionally also during training.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature; file formats, CLI and experiment orchestration live in the `avae`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod affine;
pub mod avae;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;
pub mod vae;

pub use affine::{AffineMode, AffineParams, SamplingGrid};
pub use error::{Error, IdxError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::{DType, Scalar, Tensor};
pub use vae::{LatentStats, LossReport, Mode, VaeConfig, VaeModel};
