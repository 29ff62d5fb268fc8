//! Command implementations behind the `ehrpipe` binary.

pub mod commands;
pub mod wizard;
