//! Desk-scale simulator of streaming federated continual learning with
//! adaptive inference switching, gradient-balanced replay and kernel
//! spectral boundary buffers.

pub mod buffer;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod suite;
pub mod switch;

pub use error::{FedError, Result};

/// Formats a real with 17 significant digits, which round-trips any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}
