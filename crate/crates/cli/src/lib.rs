//! Command line and HTTP front end for `tempdx-core`.

pub mod commands;
pub mod server;

pub use commands::{run, Cli};
