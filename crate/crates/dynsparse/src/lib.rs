//! Standard-library companion to `dynsparse-core`: JSON run configurations,
//! text file formats for matrices, masks and checkpoints, and the command
//! implementations behind the `dynsparse` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod presets;

pub use error::{CliError, Result};
