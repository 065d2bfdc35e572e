pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod interpolant;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod prior;
pub mod rng;
pub mod sampler;

pub use error::{Result, ScfmError};
