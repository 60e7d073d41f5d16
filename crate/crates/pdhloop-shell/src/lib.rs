//! Command-line tool and local HTTP service for the pdhloop toolkit.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod json;
pub mod ops;
pub mod service;

pub use config::ProjectConfig;
pub use error::{ShellError, ShellResult};
