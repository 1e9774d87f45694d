//! Self-monitoring navigation agent at desk scale: synthetic worlds,
//! instruction encoding, co-grounded decoding with a progress monitor,
//! training, inference strategies, and evaluation metrics.

pub mod agent;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod training;
pub mod worldgen;

pub use error::{Error, Result};
