pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
