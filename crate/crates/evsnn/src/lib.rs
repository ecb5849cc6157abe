//! File formats, checkpoints, run configuration and the command-line
//! driver around [`evsnn_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod events;
pub mod manifest;
pub mod report;
pub mod spk;

pub use error::{Error, Result};
