pub mod checkpoint;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
