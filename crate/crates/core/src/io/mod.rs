//! On-disk formats: netpbm rasters, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod netpbm;
