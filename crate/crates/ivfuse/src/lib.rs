//! Image IO, datasets, checkpoints, configuration and the command-line
//! pipeline around `ivfuse-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image_io;
pub mod synthetic;

pub use error::{Error, Result};
