//! Lip- and face-conditioned mel-spectrogram synthesis.

pub mod config;
pub mod ctc;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod infer;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
