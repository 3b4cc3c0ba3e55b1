//! Convolutional label attention and the two-block classifier head.
//!
//! For hidden states H `[N, d_e]`:
//!
//! ```text
//! Z = tanh(conv(H, W1c))           [N, d_c]
//! A = softmax_N(conv(Z, W2c) + P)  [N, L], each column sums to one
//! R = Aᵀ H                         [L, d_e]
//! logit_l = <V_l, R_l> + b_l
//! ```

use ltricd_tensor::{Bindings, Tape, Var};

use super::Result;

/// Attention weights `[N, L]` and logits `[L]` of the block `prefix`.
pub fn label_attention(tape: &mut Tape, b: &Bindings, prefix: &str, h: Var) -> Result<(Var, Var)> {
    let z = tape.conv1d_same(h, b.var(&format!("{prefix}.w1c")))?;
    let z = tape.tanh(z)?;
    let s = tape.conv1d_same(z, b.var(&format!("{prefix}.w2c")))?;
    let s = tape.add(s, b.var(&format!("{prefix}.p")))?;
    let a = tape.softmax(s, 0)?;
    let at = tape.transpose(a)?;
    let r = tape.matmul(at, h)?;
    let rv = tape.mul(r, b.var(&format!("{prefix}.v")))?;
    let logits = tape.sum_axis(rv, 1)?;
    let logits = tape.add(logits, b.var(&format!("{prefix}.b")))?;
    Ok((a, logits))
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub block1: Var,
    pub block2: Var,
    /// Sum of the two block logits.
    pub logits: Var,
}

pub fn classifier_logits(tape: &mut Tape, b: &Bindings, h: Var) -> Result<HeadOutput> {
    let (_, block1) = label_attention(tape, b, "head.block1", h)?;
    let (_, block2) = label_attention(tape, b, "head.block2", h)?;
    let logits = tape.add(block1, block2)?;
    Ok(HeadOutput { block1, block2, logits })
}
