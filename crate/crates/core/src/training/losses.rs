//! Training objectives, recorded on a tape so they can be differentiated.

use ltricd_tensor::{Tape, Tensor, Var};

use crate::model::Result;

pub const PROB_EPS: f64 = 1e-12;

/// Mean over labels of `-(1 - p_t)^gamma * ln p_t`, where `p = sigmoid(logits)`
/// clamped to `[1e-12, 1 - 1e-12]` and `p_t` is `p` for positive labels and
/// `1 - p` otherwise.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[f64], gamma: f64) -> Result<Var> {
    let n = targets.len();
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    // p_t = (1 - y) + (2y - 1) p
    let slope = tape.constant(Tensor::new(vec![n], targets.iter().map(|y| 2.0 * y - 1.0).collect())?);
    let offset = tape.constant(Tensor::new(vec![n], targets.iter().map(|y| 1.0 - y).collect())?);
    let pt = tape.mul(p, slope)?;
    let pt = tape.add(pt, offset)?;
    let log_pt = tape.log(pt)?;
    let one_minus = tape.scale(pt, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let weight = tape.pow_scalar(one_minus, gamma)?;
    let terms = tape.mul(weight, log_pt)?;
    let mean = tape.mean(terms)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Mean negative log-probability of `targets` under per-position
/// log-probabilities `[m, V]`.
pub fn generative_nll(tape: &mut Tape, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs)?.to_vec();
    let (m, v) = (shape[0], shape[1]);
    assert_eq!(m, targets.len(), "one target per decoder position");
    let mut onehot = vec![0.0; m * v];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * v + t] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![m, v], onehot)?);
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / m as f64)?)
}

/// `l_c + alpha * l_g`.
pub fn combined_loss(tape: &mut Tape, l_c: Var, l_g: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(l_g, alpha)?;
    Ok(tape.add(l_c, weighted)?)
}

/// `1 - (2 Σ y (σ1 + σ2) + ε) / (Σ (y + σ1 + σ2) + ε)` over the labels of
/// one example, with `σb = sigmoid(block b logits)`.
pub fn dice_loss(tape: &mut Tape, block1: Var, block2: Var, targets: &[f64], epsilon: f64) -> Result<Var> {
    let n = targets.len();
    let s1 = tape.sigmoid(block1)?;
    let s2 = tape.sigmoid(block2)?;
    let s = tape.add(s1, s2)?;
    let y = tape.constant(Tensor::new(vec![n], targets.to_vec())?);
    let ys = tape.mul(y, s)?;
    let num = tape.sum(ys)?;
    let num = tape.scale(num, 2.0)?;
    let num = tape.add_scalar(num, epsilon)?;
    let ssum = tape.sum(s)?;
    let den = tape.add_scalar(ssum, targets.iter().sum::<f64>() + epsilon)?;
    let inv = tape.pow_scalar(den, -1.0)?;
    let ratio = tape.mul(num, inv)?;
    let neg = tape.scale(ratio, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}
