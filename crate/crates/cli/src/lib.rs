//! Library side of the `arctopk` command-line tool.

pub mod commands;
pub mod config;
pub mod train;
