//! Modular encoder-decoder pipelines for vision-language tasks.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod interaction;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod registry;
pub mod tasks;
pub mod training;
pub mod xtns;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
