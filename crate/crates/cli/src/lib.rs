//! Command-line driver for the pose-to-mesh pipeline.

pub mod commands;
pub mod config;

pub use commands::{run, Cli, Command, CommonArgs};
pub use config::{DataConfig, PathsConfig, Profile, RunConfig};
