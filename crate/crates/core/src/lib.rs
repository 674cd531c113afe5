//! Entity state tracking over procedural text.

pub mod analysis;
pub mod baselines;
pub mod corpus;
pub mod crf;
pub mod error;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod templating;
pub mod transformer;

pub use error::{Error, Result};
