//! Command-line front end for shardwise: sharding plans, equivalence audits
//! and the shipped example pipelines.

pub mod commands;
pub mod examples;
pub mod spec_file;
