//! Library half of the `adapert` command-line tool, so runs can be driven
//! from tests as well as from the binary.

pub mod commands;
pub mod config;
