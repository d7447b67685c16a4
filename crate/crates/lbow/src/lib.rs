//! File formats, checkpoints, reports and plots around `lbow-core`.

pub mod checkpoint;
pub mod config_file;
mod error;
pub mod files;
pub mod parallel;
pub mod plot;
pub mod report;

pub use error::{Error, Result};
