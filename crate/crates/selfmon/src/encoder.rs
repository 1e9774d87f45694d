//! Instruction encoding: embedding lookup with train-time dropout, a
//! unidirectional LSTM over the real tokens, and the additive sinusoidal
//! positional encoding used by textual grounding.

use numcore::{lstm_cell, LstmWeights, NodeId, ParamBinding, ParamSet, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::worldgen::grammar::{BOS, EOS};

pub const ENCODER_DROPOUT: f64 = 0.5;

/// Train mode carries the rollout rng for dropout masks; eval mode makes
/// every forward pass a pure function of parameters and inputs.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, tape: &mut Tape, x: NodeId, rate: f64) -> Result<NodeId> {
        match self {
            Mode::Train(rng) => {
                let n = tape.value(x).numel();
                let draws: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                Ok(tape.dropout(x, rate, &draws)?)
            }
            Mode::Eval => Ok(x),
        }
    }
}

/// Look up a named parameter's node on the current tape.
pub fn param_node(params: &ParamSet, binding: &ParamBinding, name: &str) -> Result<NodeId> {
    params
        .lookup(name)
        .map(|i| binding.node(i))
        .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
}

/// Encoder parameters bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub embed: NodeId,
    pub lstm: LstmWeights,
}

impl EncoderNodes {
    pub fn bind(params: &ParamSet, binding: &ParamBinding) -> Result<Self> {
        Ok(EncoderNodes {
            embed: param_node(params, binding, "enc.embed")?,
            lstm: LstmWeights {
                w: param_node(params, binding, "enc.lstm.w")?,
                b: param_node(params, binding, "enc.lstm.b")?,
            },
        })
    }
}

/// Per-word features on the tape. `x` is [l_max, d_x] with rows at and
/// beyond `length` exactly zero; `mask` flags real tokens. `attendable`
/// further drops the BOS/EOS sentinels: they carry no word content, and
/// leaving them visible gives attention a length-independent parking spot
/// instead of forcing it to track the clause being executed.
#[derive(Debug, Clone)]
pub struct InstructionEncoding {
    pub x: NodeId,
    pub length: usize,
    pub mask: Vec<bool>,
    pub attendable: Vec<bool>,
}

/// Run the language encoder over one instruction. Hidden states of the
/// LSTM are stacked as rows of X; the zero padding rows carry no mass
/// because textual grounding masks them out.
pub fn encode_instruction(
    tape: &mut Tape,
    nodes: &EncoderNodes,
    tokens: &[usize],
    l_max: usize,
    mode: &mut Mode,
) -> Result<InstructionEncoding> {
    let embed_shape = tape.value(nodes.embed).shape().to_vec();
    let [vocab, _d_emb] = embed_shape[..] else {
        return Err(Error::Config(format!(
            "embedding table must be rank 2, got {embed_shape:?}"
        )));
    };
    let d_x = tape.value(nodes.lstm.b).numel() / 4;
    if tokens.is_empty() {
        return Err(Error::Data("cannot encode an empty instruction".into()));
    }
    if tokens.len() > l_max {
        return Err(Error::Data(format!(
            "instruction of {} tokens exceeds l_max {}",
            tokens.len(),
            l_max
        )));
    }
    let mut h = tape.leaf(Tensor::zeros(&[d_x]));
    let mut c = tape.leaf(Tensor::zeros(&[d_x]));
    let mut rows = Vec::with_capacity(tokens.len() + 1);
    let mut mask = vec![false; l_max];
    let mut attendable = vec![false; l_max];
    for (l, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Data(format!(
                "token id {t} outside vocabulary of {vocab}"
            )));
        }
        let embedded = tape.row(nodes.embed, t)?;
        let dropped = mode.dropout(tape, embedded, ENCODER_DROPOUT)?;
        let (h_next, c_next) = lstm_cell(tape, dropped, h, c, &nodes.lstm)?;
        h = h_next;
        c = c_next;
        rows.push(tape.reshape(h, &[1, d_x])?);
        mask[l] = true;
        attendable[l] = t != BOS && t != EOS;
    }
    // A degenerate all-sentinel instruction keeps every real token open so
    // attention still has somewhere to normalize.
    if !attendable.iter().any(|&a| a) {
        attendable.copy_from_slice(&mask);
    }
    if tokens.len() < l_max {
        rows.push(tape.leaf(Tensor::zeros(&[l_max - tokens.len(), d_x])));
    }
    let x = tape.concat(&rows, 0)?;
    Ok(InstructionEncoding {
        x,
        length: tokens.len(),
        mask,
        attendable,
    })
}

/// pe(l)[2i] = sin(l / 10000^(2i/d)), pe(l)[2i+1] = cos(l / 10000^(2i/d)).
pub fn positional_vector(l: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs a positive even width, got {d}"
        )));
    }
    let mut pe = vec![0.0; d];
    for i in 0..d / 2 {
        let rate = 10000f64.powf(2.0 * i as f64 / d as f64);
        let arg = l as f64 / rate;
        pe[2 * i] = arg.sin();
        pe[2 * i + 1] = arg.cos();
    }
    Ok(pe)
}

/// Stacked pe(0..rows) as a constant [rows, d] tensor.
pub fn positional_encoding_matrix(rows: usize, d: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(rows * d);
    for l in 0..rows {
        values.extend(positional_vector(l, d)?);
    }
    Ok(Tensor::new(vec![rows, d], values)?)
}

/// X + PE, shape preserving, on the tape.
pub fn apply_positional_encoding(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let [rows, d] = shape[..] else {
        return Err(Error::Config(format!(
            "positional encoding expects rank 2, got {shape:?}"
        )));
    };
    let pe = tape.leaf(positional_encoding_matrix(rows, d)?);
    Ok(tape.add(x, pe)?)
}
