#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion_model;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};
