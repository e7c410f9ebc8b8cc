pub mod dataset;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod report;
mod scalar;
pub mod train;

pub use scalar::Scalar;
