pub mod alignment;
pub mod attention;
pub mod autodiff;
pub mod metrics;
pub mod model;
pub mod policy;
mod error;
mod features;
pub mod segmentation;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use features::FeatureSequence;
