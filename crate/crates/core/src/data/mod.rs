//! Datasets, the STF tensor format, and configuration files.

pub mod config;
pub mod stf;
pub mod synthetic;

pub use config::{config_echo, config_load, config_parse};
pub use stf::{stf_read, stf_write};
pub use synthetic::{gen_factors_lite, gen_gmm2d, FactorDataset};
