//! Autoregressive code decoder.
//!
//! The decoder vocabulary is code-atomic: ids `0..L` are codes, `L` is
//! end-of-sequence, and `L + 1` is a start symbol used only as input. Each
//! layer applies causal self-attention over the prefix, cross-attention
//! over the encoder states H, and a feed-forward block.

use ltricd_tensor::{Bindings, Tape, Tensor, Var};

use super::encoder::{attention_block, feed_forward, project_kv};
use super::{key_padding_bias, ModelConfig, ModelError, Result};

/// Cross-attention keys and values over H, reusable across decoding steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderMemory {
    k: Var,
    v: Var,
    bias: Var,
}

pub fn decoder_memory(tape: &mut Tape, b: &Bindings, h: Var, mask: &[bool]) -> Result<DecoderMemory> {
    let (k, v) = project_kv(tape, b, "decoder.cross_attn", h)?;
    let bias = tape.constant(key_padding_bias(mask));
    Ok(DecoderMemory { k, v, bias })
}

fn causal_bias(n: usize) -> Tensor {
    let data = (0..n * n)
        .map(|i| if i % n > i / n { -1e9 } else { 0.0 })
        .collect();
    Tensor::new(vec![n, n], data).expect("square")
}

/// Log-probabilities `[m, L + 1]` of the next token after each prefix of
/// `inputs` (which should start with the start symbol).
pub fn decoder_log_probs(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    mem: &DecoderMemory,
    inputs: &[usize],
) -> Result<Var> {
    let m = inputs.len();
    if m == 0 || m > cfg.max_output_len {
        return Err(ModelError::Length {
            len: m,
            max: cfg.max_output_len,
        });
    }
    let tok = tape.embedding(b.var("decoder.token_embedding"), inputs)?;
    let pos = tape.slice_rows(b.var("decoder.position_embedding"), 0, m)?;
    let x = tape.add(tok, pos)?;
    let kv = project_kv(tape, b, "decoder.self_attn", x)?;
    let causal = tape.constant(causal_bias(m));
    let x = attention_block(tape, b, "decoder.self_attn", x, kv, Some(causal))?;
    let x = attention_block(tape, b, "decoder.cross_attn", x, (mem.k, mem.v), Some(mem.bias))?;
    let x = feed_forward(tape, b, "decoder.ff", x)?;
    let logits = tape.matmul(x, b.var("decoder.out.w"))?;
    let logits = tape.add(logits, b.var("decoder.out.b"))?;
    Ok(tape.log_softmax(logits, 1)?)
}

/// Teacher-forcing inputs and targets for a code-id sequence:
/// `[BOS, t1 .. tn]` and `[t1 .. tn, EOS]`.
pub fn teacher_forcing(cfg: &ModelConfig, codes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let len = codes.len() + 1;
    if len > cfg.max_output_len {
        return Err(ModelError::Length {
            len,
            max: cfg.max_output_len,
        });
    }
    let mut inputs = Vec::with_capacity(len);
    inputs.push(cfg.bos());
    inputs.extend_from_slice(codes);
    let mut targets = codes.to_vec();
    targets.push(cfg.eos());
    Ok((inputs, targets))
}
