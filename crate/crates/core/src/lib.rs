//! Spatio-temporal multi-task transformer for joint moving-object detection
//! and moving-object segmentation.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod posenc;
pub mod trainer;

pub use error::{Error, Result};
