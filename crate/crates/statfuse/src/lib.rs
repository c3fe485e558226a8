#![allow(clippy::needless_range_loop)]
#![allow(clippy::excessive_precision)]
#![allow(clippy::unusual_byte_groupings)]
#![allow(clippy::too_many_arguments)]

//! statfuse: a statistical data-fusion engine.
//!
//! Trains conditional models on a donor survey and simulates the donor's
//! unique variables onto a larger recipient survey via conditional
//! expectation matching, producing multi-implicate microdata plus pooled
//! estimation and internal-validation tooling.

pub mod analysis;
pub mod error;
pub mod gbdt;
pub mod matchcore;
pub mod matrix;
pub mod microdata;
pub mod pipeline;
pub mod prescreen;
pub mod rng;
pub mod stats;
pub mod synthbench;
pub mod validation;

pub use error::{Error, Result};
