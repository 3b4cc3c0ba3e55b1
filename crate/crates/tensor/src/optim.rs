use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{GradStore, ParamStore, Result, Tensor, TensorRecord};

/// A first-order update rule over a [`ParamStore`].
///
/// Steps are deterministic functions of (parameters, gradients, state).
/// Gradients are left untouched; callers clear them when they want to.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore);
    fn state(&self) -> OptimizerState;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn state(&self) -> OptimizerState {
        OptimizerState::Adam {
            config: self.cfg,
            step: self.step,
            m: encode_map(&self.m),
            v: encode_map(&self.v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    pub lr: f64,
    /// Exponent of the second-moment decay schedule `1 - t^decay_rate`.
    pub decay_rate: f64,
    pub eps: f64,
    pub clip_threshold: f64,
}

impl AdafactorConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdafactorConfig {
            lr,
            decay_rate: -0.8,
            eps: 1e-30,
            clip_threshold: 1.0,
        }
    }
}

/// Adafactor with a fixed learning rate and no first moment. Tensors of
/// rank ≥ 2 keep factored row/column second-moment estimates over their last
/// two axes; vectors keep a full estimate.
#[derive(Clone, Debug)]
pub struct Adafactor {
    cfg: AdafactorConfig,
    step: u64,
    row: BTreeMap<String, Tensor>,
    col: BTreeMap<String, Tensor>,
    full: BTreeMap<String, Tensor>,
}

impl Adafactor {
    pub fn new(cfg: AdafactorConfig) -> Self {
        Adafactor {
            cfg,
            step: 0,
            row: BTreeMap::new(),
            col: BTreeMap::new(),
            full: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adafactor {
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        let beta2 = 1.0 - (self.step as f64).powf(self.cfg.decay_rate);
        let eps = self.cfg.eps;
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let shape = g.shape();
            let gd = g.data();
            let mut update: Vec<f64>;
            if shape.len() >= 2 {
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = gd.len() / (r * c).max(1);
                let row = self
                    .row
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(&[batch, r]));
                let col = self
                    .col
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(&[batch, c]));
                update = vec![0.0; gd.len()];
                for b in 0..batch {
                    let block = &gd[b * r * c..(b + 1) * r * c];
                    let rd = &mut row.data_mut()[b * r..(b + 1) * r];
                    for i in 0..r {
                        let mean = block[i * c..(i + 1) * c]
                            .iter()
                            .map(|x| x * x + eps)
                            .sum::<f64>()
                            / c as f64;
                        rd[i] = beta2 * rd[i] + (1.0 - beta2) * mean;
                    }
                    let cd = &mut col.data_mut()[b * c..(b + 1) * c];
                    for j in 0..c {
                        let mean = (0..r).map(|i| block[i * c + j].powi(2) + eps).sum::<f64>()
                            / r as f64;
                        cd[j] = beta2 * cd[j] + (1.0 - beta2) * mean;
                    }
                    let rd = &row.data()[b * r..(b + 1) * r];
                    let cd = &col.data()[b * c..(b + 1) * c];
                    let row_mean = rd.iter().sum::<f64>() / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let vhat = rd[i] * cd[j] / row_mean;
                            update[b * r * c + i * c + j] = block[i * c + j] / vhat.sqrt();
                        }
                    }
                }
            } else {
                let full = self
                    .full
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(shape));
                let fd = full.data_mut();
                update = gd
                    .iter()
                    .zip(fd.iter_mut())
                    .map(|(&x, v)| {
                        *v = beta2 * *v + (1.0 - beta2) * (x * x + eps);
                        x / v.sqrt()
                    })
                    .collect();
            }
            let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len().max(1) as f64).sqrt();
            let denom = (rms / self.cfg.clip_threshold).max(1.0);
            for (pv, u) in p.data_mut().iter_mut().zip(&update) {
                *pv -= self.cfg.lr * u / denom;
            }
        }
    }

    fn state(&self) -> OptimizerState {
        OptimizerState::Adafactor {
            config: self.cfg,
            step: self.step,
            row: encode_map(&self.row),
            col: encode_map(&self.col),
            full: encode_map(&self.full),
        }
    }
}

/// Serializable optimizer state, stored alongside parameters in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerState {
    Adam {
        config: AdamConfig,
        step: u64,
        m: BTreeMap<String, TensorRecord>,
        v: BTreeMap<String, TensorRecord>,
    },
    Adafactor {
        config: AdafactorConfig,
        step: u64,
        row: BTreeMap<String, TensorRecord>,
        col: BTreeMap<String, TensorRecord>,
        full: BTreeMap<String, TensorRecord>,
    },
}

impl OptimizerState {
    /// Rebuilds the optimizer this state was taken from.
    pub fn restore(&self) -> Result<Box<dyn Optimizer + Send>> {
        Ok(match self {
            OptimizerState::Adam { config, step, m, v } => Box::new(Adam {
                cfg: *config,
                step: *step,
                m: decode_map(m)?,
                v: decode_map(v)?,
            }),
            OptimizerState::Adafactor {
                config,
                step,
                row,
                col,
                full,
            } => Box::new(Adafactor {
                cfg: *config,
                step: *step,
                row: decode_map(row)?,
                col: decode_map(col)?,
                full: decode_map(full)?,
            }),
        })
    }
}

fn encode_map(m: &BTreeMap<String, Tensor>) -> BTreeMap<String, TensorRecord> {
    m.iter()
        .map(|(k, v)| (k.clone(), TensorRecord::encode(v)))
        .collect()
}

fn decode_map(m: &BTreeMap<String, TensorRecord>) -> Result<BTreeMap<String, Tensor>> {
    m.iter().map(|(k, r)| Ok((k.clone(), r.decode()?))).collect()
}
