//! Abdominal MRI preprocessing, quality control and fat quantification.

pub mod anomaly;
pub mod assembly;
pub mod bias;
pub mod error;
pub mod imgproc;
pub mod landmarks;
pub mod phantom;
pub mod pipeline;
pub mod placement;
pub mod quantify;
pub mod rng;
pub mod swap;
pub mod volume;

pub use error::{Error, FailureReason, Result};
