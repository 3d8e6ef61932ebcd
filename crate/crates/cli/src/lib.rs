//! Command-line workflow around the `tokensds` pipeline: a TOML run
//! configuration, one subcommand per stage, and artifact export.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use commands::{Overrides, Run};
pub use config::RunConfig;
