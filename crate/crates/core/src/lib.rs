pub mod asr;
pub mod audio;
pub mod cache;
pub mod classifier;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalreport;
pub mod external;
pub mod features;
pub mod fixtures;
pub mod hash;
pub mod manifest;
pub mod pipeline;
pub mod regressor;
pub mod rng;

pub use error::{Error, Result};
