//! File formats, dataset I/O and the command implementations behind the
//! `vipa` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
pub use vipa_core as core;
