//! IO, configuration and command implementations for the `deepwarp` CLI.

pub mod config;
pub mod io;
pub mod model;
pub mod run;
pub mod svg;
