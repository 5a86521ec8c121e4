pub mod baseline;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod kde;
pub mod pipeline;
pub mod predict;
pub mod rules;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
