//! Library half of the `cxhg` command-line tool.

pub mod commands;
pub mod config;
pub mod ppm;
