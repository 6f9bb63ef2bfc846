//! File formats, checkpoints and the command line for `geat`.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod manifest;
pub mod pca;
pub mod tables;

pub use error::{GeatError, Result};
