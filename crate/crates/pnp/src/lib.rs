//! File formats, training harness and command implementations for the
//! pull-push segmentation core.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod manifest;
pub mod train;
pub mod volume;

pub use config::RunConfig;
pub use error::{PnpError, Result};
