//! JSON checkpoints: model configuration, vocabularies, parameters and
//! optimizer state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ltricd_tensor::{OptimizerState, ParamStore, TensorRecord, CHECKPOINT_FORMAT_VERSION};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::tokenize::TokenVocabulary;
use crate::icd::{CodeVocabulary, IcdCode};
use crate::model::{Model, ModelConfig, ModelError};
use crate::ordering::OrderingStrategy;

const FORMAT: &str = "ltricd-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Code vocabulary as kind-tagged display codes, in id order.
    pub codes: Vec<String>,
    pub tokens: TokenVocabulary,
    pub ordering: OrderingStrategy,
    pub phase: u8,
    pub epoch: usize,
    pub best_micro_f1: f64,
    pub params: BTreeMap<String, TensorRecord>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &Model,
        codes: &CodeVocabulary,
        tokens: &TokenVocabulary,
        ordering: OrderingStrategy,
        phase: u8,
        epoch: usize,
        best_micro_f1: f64,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: CHECKPOINT_FORMAT_VERSION,
            model: model.config.clone(),
            codes: codes.codes().iter().map(IcdCode::tagged).collect(),
            tokens: tokens.clone(),
            ordering,
            phase,
            epoch,
            best_micro_f1,
            params: model.params.to_records(),
            optimizer,
        }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        let params = ParamStore::from_records(&self.params)?;
        Model::from_parts(self.model.clone(), params)
    }

    pub fn code_vocabulary(&self) -> Result<CodeVocabulary, ModelError> {
        let codes = self
            .codes
            .iter()
            .map(|s| IcdCode::parse_tagged(s).map_err(|e| ModelError::Config(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let vocab = CodeVocabulary::from_codes(codes);
        if vocab.len() != self.codes.len() {
            return Err(ModelError::Config("checkpoint code list is not a sorted set".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string(self).map_err(|e| CheckpointError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, json).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if ckpt.format != FORMAT || ckpt.version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            });
        }
        Ok(ckpt)
    }
}

/// SHA-256 (hex) over the names and little-endian bytes of the selected
/// parameters.
pub fn param_digest(params: &ParamStore, select: impl Fn(&str) -> bool) -> String {
    let digest = Sha256::digest(params.bytes_of(select));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
