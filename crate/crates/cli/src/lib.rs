//! Library side of the `uad` command-line tool.

pub mod commands;
pub mod config;
