#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod augment;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod fusion;
pub mod las;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod tiff;
pub mod types;

pub use error::{Error, Result};
