//! File formats and the command-line front end for `paca-core`.

pub mod checkpoint;
pub mod cifar;
pub mod cli;
mod error;
pub mod netpbm;

pub use error::{IoError, Result};
