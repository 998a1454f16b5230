//! Multi-frame radar point-cloud fusion and meta-learned pose estimation.

pub mod cli;
pub mod data;
pub mod error;
mod fsutil;
pub mod meta;
pub mod nn;
pub mod pointcloud;
pub mod train;

pub use error::{Error, Result};
