//! Core of a pull-push boundary segmentation network for volumetric data.
//!
//! `no_std` + `alloc`: a small reverse-mode tensor engine, the network
//! blocks, the pushing branch (semantic difference module with EID
//! kernels), the pulling branch (center atlas and class clustering module),
//! model assembly and losses, an AdamW trainer, boundary metrics and a
//! deterministic synthetic volume generator. File formats and the command
//! line live in the companion `pnp` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ccm;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod sdm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Ctx, Init, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
