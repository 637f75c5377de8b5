//! Patch-based crowd counting with density-conditioned patch rescaling, a
//! multi-resolution fusion trunk and attention-gated count regression.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prm;
pub mod resize;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
