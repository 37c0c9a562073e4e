//! Prompt-driven multiple-object tracking with region, tracklet and prompt
//! correlations, plus the data formats, metrics and synthetic world around it.

pub mod annotations;
pub mod bbox;
pub mod checkpoint;
pub mod error;
pub mod hungarian;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod simworld;
pub mod tensor;
pub mod tokens;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
