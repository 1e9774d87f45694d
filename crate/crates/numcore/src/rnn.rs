use crate::error::{NumError, Result};
use crate::tape::{NodeId, Tape};

/// Fused-weight LSTM cell parameters on a tape: one weight matrix of shape
/// [(d_in + d_h) x 4*d_h] and one bias of width 4*d_h. Gate blocks are
/// ordered (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w: NodeId,
    pub b: NodeId,
}

/// One LSTM step. `input` is rank-1 of width d_in; h_prev and c_prev are
/// rank-1 of width d_h. Returns (h, c).
pub fn lstm_cell(
    tape: &mut Tape,
    input: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    weights: &LstmWeights,
) -> Result<(NodeId, NodeId)> {
    let d_h = tape.value(h_prev).numel();
    let d_in = tape.value(input).numel();
    let w_shape = tape.value(weights.w).shape().to_vec();
    if w_shape != [d_in + d_h, 4 * d_h] {
        return Err(NumError::ShapeMismatch {
            op: "lstm_cell",
            lhs: vec![d_in + d_h, 4 * d_h],
            rhs: w_shape,
        });
    }
    if tape.value(c_prev).numel() != d_h {
        return Err(NumError::ShapeMismatch {
            op: "lstm_cell",
            lhs: vec![d_h],
            rhs: tape.value(c_prev).shape().to_vec(),
        });
    }

    let z = tape.concat(&[input, h_prev], 0)?;
    let z_row = tape.reshape(z, &[1, d_in + d_h])?;
    let pre_row = tape.matmul(z_row, weights.w)?;
    let pre_flat = tape.reshape(pre_row, &[4 * d_h])?;
    let pre = tape.add(pre_flat, weights.b)?;

    let i_pre = tape.slice(pre, 0, d_h)?;
    let f_pre = tape.slice(pre, d_h, d_h)?;
    let g_pre = tape.slice(pre, 2 * d_h, d_h)?;
    let o_pre = tape.slice(pre, 3 * d_h, d_h)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}
