use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::{Result, Tape, Tensor, TensorError, Var};

/// Version tag written into every serialized parameter map.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serialized tensor: shape plus base64 of the little-endian f64 values.
/// Encoding the raw bytes keeps reloads bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(t: &Tensor) -> Self {
        TensorRecord {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(t.to_le_bytes()),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| TensorError::Checkpoint(format!("bad base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(TensorError::Checkpoint(format!(
                "{} bytes is not a whole number of f64 values",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`. Parameters for which `trainable`
    /// returns false are recorded as constants and never receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bindings { vars }
    }

    /// Little-endian bytes of the selected parameters, in name order.
    pub fn bytes_of(&self, select: impl Fn(&str) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.params {
            if select(k) {
                out.extend_from_slice(k.as_bytes());
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), TensorRecord::encode(v)))
            .collect()
    }

    pub fn from_records(records: &BTreeMap<String, TensorRecord>) -> Result<Self> {
        let params = records
            .iter()
            .map(|(k, r)| Ok((k.clone(), r.decode()?)))
            .collect::<Result<_>>()?;
        Ok(ParamStore { params })
    }
}

/// The tape variables a [`ParamStore`] was bound to.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// # Panics
    /// If no parameter of that name was bound; parameter names are fixed by
    /// the model definition, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects the gradients accumulated on the tape for every trainable
    /// binding. Trainable parameters the loss did not reach get zeros.
    pub fn gradients(&self, tape: &Tape) -> GradStore {
        let mut grads = GradStore::default();
        for (name, var) in &self.vars {
            if !tape.requires_grad(*var) {
                continue;
            }
            let g = match tape.grad(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.shape(*var).expect("bound var")),
            };
            grads.grads.insert(name.clone(), g);
        }
        grads
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.grads.insert(name.into(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .values()
            .all(|g| g.data().iter().all(|x| x.is_finite()))
    }
}
