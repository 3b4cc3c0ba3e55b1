//! Segment-pooled transformer encoder.
//!
//! The input is cut into fixed-length segments that are encoded
//! independently with shared weights (embedding, one single-head
//! self-attention layer, one feed-forward layer, residual connections) and
//! concatenated back along the token axis.

use ltricd_tensor::{Bindings, Tape, Tensor, Var};

use super::{key_padding_bias, ModelConfig, ModelError, Result};

/// Scaled dot-product attention of `q` over `k`/`v`, with an optional
/// additive bias broadcast onto the score matrix.
pub(crate) fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    let d = tape.shape(q)?[1];
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let mut s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    if let Some(b) = bias {
        s = tape.add(s, b)?;
    }
    let a = tape.softmax(s, 1)?;
    Ok(tape.matmul(a, v)?)
}

/// Projected attention block `x + attend(x Wq, m Wk, m Wv) Wo`.
pub(crate) fn attention_block(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    x: Var,
    keys: (Var, Var),
    bias: Option<Var>,
) -> Result<Var> {
    let q = tape.matmul(x, b.var(&format!("{prefix}.wq")))?;
    let o = attend(tape, q, keys.0, keys.1, bias)?;
    let o = tape.matmul(o, b.var(&format!("{prefix}.wo")))?;
    Ok(tape.add(x, o)?)
}

/// Key and value projections of `m` for the attention block `prefix`.
pub(crate) fn project_kv(tape: &mut Tape, b: &Bindings, prefix: &str, m: Var) -> Result<(Var, Var)> {
    let k = tape.matmul(m, b.var(&format!("{prefix}.wk")))?;
    let v = tape.matmul(m, b.var(&format!("{prefix}.wv")))?;
    Ok((k, v))
}

/// `x + W2 gelu(x W1 + b1) + b2`.
pub(crate) fn feed_forward(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, b.var(&format!("{prefix}.w1")))?;
    let h = tape.add(h, b.var(&format!("{prefix}.b1")))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, b.var(&format!("{prefix}.w2")))?;
    let h = tape.add(h, b.var(&format!("{prefix}.b2")))?;
    Ok(tape.add(x, h)?)
}

fn encode_segment(tape: &mut Tape, b: &Bindings, ids: &[usize], mask: &[bool]) -> Result<Var> {
    let tok = tape.embedding(b.var("encoder.token_embedding"), ids)?;
    let x = tape.add(tok, b.var("encoder.position_embedding"))?;
    let kv = project_kv(tape, b, "encoder.attn", x)?;
    let bias = tape.constant(key_padding_bias(mask));
    let x = attention_block(tape, b, "encoder.attn", x, kv, Some(bias))?;
    feed_forward(tape, b, "encoder.ff", x)
}

/// Encodes `max_input_len` token ids into H of shape `[N, d_e]`. Identical
/// segments (in practice, all-padding ones) are encoded once.
pub fn encode(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, ids: &[usize], mask: &[bool]) -> Result<Var> {
    if ids.len() != cfg.max_input_len || mask.len() != ids.len() {
        return Err(ModelError::Tensor(ltricd_tensor::TensorError::Shape {
            op: "encode",
            detail: format!(
                "expected {} ids and mask entries, got {} and {}",
                cfg.max_input_len,
                ids.len(),
                mask.len()
            ),
        }));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.token_vocab) {
        return Err(ModelError::Config(format!("token id {bad} outside the vocabulary")));
    }
    let s = cfg.segment_len;
    let mut parts: Vec<Var> = Vec::with_capacity(cfg.segments());
    let mut done: Vec<(&[usize], &[bool], Var)> = Vec::new();
    for (seg_ids, seg_mask) in ids.chunks(s).zip(mask.chunks(s)) {
        let reuse = done
            .iter()
            .find(|(i, m, _)| *i == seg_ids && *m == seg_mask)
            .map(|(_, _, v)| *v);
        let h = match reuse {
            Some(v) => v,
            None => {
                let v = encode_segment(tape, b, seg_ids, seg_mask)?;
                done.push((seg_ids, seg_mask, v));
                v
            }
        };
        parts.push(h);
    }
    Ok(tape.concat(&parts, 0)?)
}

/// H as a plain tensor, computed without recording gradients.
pub fn encode_values(model: &super::Model, ids: &[usize], mask: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, |_| false);
    let h = encode(&mut tape, &b, &model.config, ids, mask)?;
    Ok(tape.value(h)?.clone())
}
