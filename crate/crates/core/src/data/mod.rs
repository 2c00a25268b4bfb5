//! On-disk formats, dataset access and synthetic data.

pub mod bvt;
pub mod checkpoint;
pub mod dataset;
pub mod split;
pub mod synthetic;
