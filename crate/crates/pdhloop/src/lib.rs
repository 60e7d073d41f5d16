//! Frequency-domain toolkit for Pound-Drever-Hall laser locks.
//!
//! The crate is organised the way a lock is debugged on the bench:
//! component responses ([`tfcore`]), discriminator physics ([`pdh`]),
//! loop assembly and margins ([`loopan`]), noise and linewidth
//! ([`linewidth`]), the tuning workflow ([`tuner`]) and measurement
//! ingestion ([`ingest`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ingest;
pub mod linewidth;
pub mod loopan;
pub mod par;
pub mod pdh;
pub mod presets;
pub mod special;
pub mod tfcore;
pub mod tuner;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use par::ExecMode;
