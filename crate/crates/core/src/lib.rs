//! Domain-adaptive one-stage detection on a synthetic two-domain benchmark.
//!
//! The crate provides a small reverse-mode autodiff engine ([`graph`]), a
//! procedural scene generator ([`data`]), an anchor-based single-shot
//! detector ([`detector`]), and the three adaptation objectives layered on
//! top of it: confidence-weighted image-level alignment ([`dcbr`]),
//! categorical-pattern pixel alignment ([`copm`]), and prototype-based
//! category consistency ([`rjca`]). Everything runs in `f64` on the CPU and
//! is bit-reproducible for a fixed seed.

pub mod rng;
pub mod tensor;
pub mod graph;
pub mod data;
pub mod detector;
pub mod dcbr;
pub mod copm;
pub mod rjca;
pub mod config;
pub mod checkpoint;
pub mod train;

use thiserror::Error as ThisError;

/// Crate-wide error type.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{file}: byte {offset}: {msg}")]
    Parse { file: String, offset: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
