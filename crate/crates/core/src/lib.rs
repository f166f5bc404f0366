//! DSA-LTD: liver-tumor segmentation from digital subtraction angiography
//! videos, driven by a synthetic phantom dataset.
//!
//! The pipeline selects a key frame from the trailing stable portion of a
//! video, learns a temporal-difference map supervised by the `k` vs `k-9`
//! frame difference, predicts the liver region as a spatial prior, and fuses
//! all three into a tumor probability map.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod harness;
pub mod imagery;
pub mod keyframe;
pub mod losses;
pub mod models;
pub mod motion;
pub mod nn;
pub mod synthgen;
pub mod train;

pub use error::{LtdError, Result};
