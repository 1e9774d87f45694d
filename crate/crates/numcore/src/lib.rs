//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records a forward computation as an append-only list of
//! nodes; [`Tape::backward`] walks it in reverse, accumulating gradients
//! additively across fan-out. Tapes are cheap and rebuilt per episode;
//! parameters live outside the tape in a [`ParamSet`] and are loaded as
//! leaves each time (see [`ParamSet::bind`]).
//!
//! The op set is exactly what a small attention/LSTM agent needs: matmul,
//! masked softmax building blocks, elementwise nonlinearities, concat /
//! slice / row indexing, dropout, batch norm in batch-stat and
//! frozen-stat modes, an LSTM cell composed from primitives, and a
//! bias-corrected Adam step with global-norm clipping.

pub mod check;
mod error;
pub mod optim;
mod params;
mod rnn;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use params::{ParamBinding, ParamSet, Parameter};
pub use rnn::{lstm_cell, LstmWeights};
pub use tape::{softmax_values, Gradients, NodeId, Tape};
pub use tensor::Tensor;
