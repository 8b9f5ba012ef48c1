//! Unified document image segmentation.

pub mod datamodel;
pub mod encoder;
pub mod checkpoint;
pub mod cli;
mod error;
pub mod heads;
pub mod hqd;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod overlay;
pub mod queries;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
