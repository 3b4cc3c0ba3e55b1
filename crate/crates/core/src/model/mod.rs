//! Shared encoder, label-attention classifier head, and code decoder.

pub mod attention;
pub mod beam;
pub mod decoder;
pub mod encoder;
mod session;

pub use attention::{classifier_logits, label_attention, HeadOutput};
pub use beam::{beam_search, greedy, Hypothesis, StepScorer};
pub use decoder::{decoder_log_probs, decoder_memory, DecoderMemory};
pub use encoder::encode;
pub use session::InferenceSession;

use ltricd_tensor::{ParamStore, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("target of {len} tokens exceeds the maximum output length {max}")]
    Length { len: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input token vocabulary size.
    pub token_vocab: usize,
    /// Number of code labels L.
    pub n_labels: usize,
    pub d_e: usize,
    pub d_c: usize,
    /// Convolution width of the label-attention blocks.
    pub kernel: usize,
    pub segment_len: usize,
    pub max_input_len: usize,
    /// Hidden width of the encoder feed-forward layer.
    pub d_ff: usize,
    pub d_dec: usize,
    pub dec_ff: usize,
    /// Maximum decoder sequence length, end-of-sequence included.
    pub max_output_len: usize,
}

impl ModelConfig {
    pub fn new(token_vocab: usize, n_labels: usize) -> Self {
        ModelConfig {
            token_vocab,
            n_labels,
            d_e: 64,
            d_c: 64,
            kernel: 3,
            segment_len: 512,
            max_input_len: 5120,
            d_ff: 128,
            d_dec: 64,
            dec_ff: 128,
            max_output_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.token_vocab == 0 || self.n_labels == 0 {
            return bad("token vocabulary and label set must be non-empty");
        }
        if [self.d_e, self.d_c, self.d_ff, self.d_dec, self.dec_ff].contains(&0) {
            return bad("all widths must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.segment_len == 0 || self.max_input_len == 0 || self.max_input_len % self.segment_len != 0 {
            return bad("max_input_len must be a positive multiple of segment_len");
        }
        if self.max_output_len == 0 {
            return bad("max_output_len must be positive");
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.max_input_len / self.segment_len
    }

    /// End-of-sequence id in the decoder vocabulary; code ids are `0..L`.
    pub fn eos(&self) -> usize {
        self.n_labels
    }

    /// Start symbol, only ever fed to the decoder.
    pub fn bos(&self) -> usize {
        self.n_labels + 1
    }

    /// Decoder output vocabulary: the codes plus end-of-sequence.
    pub fn output_vocab(&self) -> usize {
        self.n_labels + 1
    }

    /// Every parameter with its shape and initialization bound. Weights
    /// draw from uniform(-a, a) with a = fan_in^-1/2; embeddings use a = 1;
    /// biases and the position-aware bias start at zero.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>, f64)> {
        let (de, dc, k, l) = (self.d_e, self.d_c, self.kernel, self.n_labels);
        let inv = |fan_in: usize| (fan_in as f64).powf(-0.5);
        let mut specs = vec![
            ("encoder.token_embedding".to_string(), vec![self.token_vocab, de], 1.0),
            ("encoder.position_embedding".to_string(), vec![self.segment_len, de], 1.0),
        ];
        let mut attn = |prefix: &str, d_q: usize, d_kv: usize, d: usize| {
            specs.push((format!("{prefix}.wq"), vec![d_q, d], inv(d_q)));
            specs.push((format!("{prefix}.wk"), vec![d_kv, d], inv(d_kv)));
            specs.push((format!("{prefix}.wv"), vec![d_kv, d], inv(d_kv)));
            specs.push((format!("{prefix}.wo"), vec![d, d_q], inv(d)));
        };
        attn("encoder.attn", de, de, de);
        attn("decoder.self_attn", self.d_dec, self.d_dec, self.d_dec);
        attn("decoder.cross_attn", self.d_dec, de, self.d_dec);
        for (prefix, d, ff) in [("encoder.ff", de, self.d_ff), ("decoder.ff", self.d_dec, self.dec_ff)] {
            specs.push((format!("{prefix}.w1"), vec![d, ff], inv(d)));
            specs.push((format!("{prefix}.b1"), vec![ff], 0.0));
            specs.push((format!("{prefix}.w2"), vec![ff, d], inv(ff)));
            specs.push((format!("{prefix}.b2"), vec![d], 0.0));
        }
        for block in ["head.block1", "head.block2"] {
            specs.push((format!("{block}.w1c"), vec![k, de, dc], inv(k * de)));
            specs.push((format!("{block}.w2c"), vec![k, dc, l], inv(k * dc)));
            specs.push((format!("{block}.p"), vec![self.max_input_len, 1], 0.0));
            specs.push((format!("{block}.v"), vec![l, de], inv(de)));
            specs.push((format!("{block}.b"), vec![l], 0.0));
        }
        specs.push(("decoder.token_embedding".into(), vec![l + 2, self.d_dec], 1.0));
        specs.push(("decoder.position_embedding".into(), vec![self.max_output_len, self.d_dec], 1.0));
        specs.push(("decoder.out.w".into(), vec![self.d_dec, l + 1], inv(self.d_dec)));
        specs.push(("decoder.out.b".into(), vec![l + 1], 0.0));
        specs
    }
}

/// Parameter groups, by name prefix.
pub fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn is_decoder(name: &str) -> bool {
    name.starts_with("decoder.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, a) in config.parameter_specs() {
            let n: usize = shape.iter().product();
            let data = if a == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Model { config, params })
    }

    /// Checks that `params` has exactly the parameters `config` implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let specs = config.parameter_specs();
        if specs.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in specs {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Model { config, params })
    }
}

/// Additive attention bias: 0 for real tokens, -1e9 for padding.
pub(crate) fn key_padding_bias(mask: &[bool]) -> Tensor {
    let data = mask.iter().map(|&m| if m { 0.0 } else { -1e9 }).collect();
    Tensor::new(vec![1, mask.len()], data).expect("row vector")
}
