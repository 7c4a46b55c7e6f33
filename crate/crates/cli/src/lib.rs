//! Command-line front end: file formats, configuration, manifests and the
//! five commands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod io;
pub mod manifest;
pub mod table;

pub use cli::{exit_code, run, Cli};
pub use config::RunConfig;
pub use manifest::Manifest;
