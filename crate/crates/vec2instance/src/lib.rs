//! File formats, checkpoints, reports and the `v2i` command-line tool on
//! top of `vec2instance-core`.

pub use vec2instance_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod plot;
pub mod report;

pub use error::{Error, Result};
