//! Oracles shared by the unit-level suites and the acceptance run.
#![allow(dead_code)]

pub mod blobs;
pub mod model_case;
pub mod ops;
pub mod sdm_case;
