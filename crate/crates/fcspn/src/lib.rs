//! File formats, run configuration and command-line front end for
//! `fcspn-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{FormatError, Result};
