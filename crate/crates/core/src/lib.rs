pub mod config;
pub mod error;
pub mod lm;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod perceiver;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
