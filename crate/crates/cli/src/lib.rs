//! Configuration-driven runner for the chemotax toolkit.

// negated float comparisons reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod execute;

pub use config::{parse_config, parse_value, Mode, RunConfig};
pub use execute::{execute, Outcome, RunError, RunOptions};
