//! Batch experiment front-end for the laboratory: config files, run
//! manifests, and the `train`, `verify`, `sweep` and `plot` commands.

pub mod config_file;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod sweep;
pub mod train;
pub mod verify;

pub use error::CliError;
