//! Configuration and pipeline stages of the `sela` command.

pub mod config;
pub mod run;
