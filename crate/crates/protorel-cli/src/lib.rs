//! Operator surface for the few-shot relation classifier: configuration
//! files, binary checkpoints, and the subcommand implementations behind the
//! `protorel` binary. Exposed as a library so integration tests can open
//! the artifacts the binary writes.

pub mod checkpoint;
pub mod commands;
pub mod config;
