//! Run configuration: everything a command needs besides its input files.

use std::path::{Path, PathBuf};

use ltricd_core::corpus::deid::SurrogateRules;
use ltricd_core::corpus::synth::SynthConfig;
use ltricd_core::metrics::Averaging;
use ltricd_core::model::ModelConfig;
use ltricd_core::ordering::OrderingStrategy;
use ltricd_core::predict::{PredictConfig, MAX_BEAM};
use ltricd_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

/// Model hyperparameters; vocabulary sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_e: usize,
    pub d_c: usize,
    pub kernel: usize,
    pub segment_len: usize,
    pub max_input_len: usize,
    pub d_ff: usize,
    pub d_dec: usize,
    pub dec_ff: usize,
    pub max_output_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(0, 0);
        ModelSection {
            d_e: m.d_e,
            d_c: m.d_c,
            kernel: m.kernel,
            segment_len: m.segment_len,
            max_input_len: m.max_input_len,
            d_ff: m.d_ff,
            d_dec: m.d_dec,
            dec_ff: m.dec_ff,
            max_output_len: m.max_output_len,
        }
    }
}

impl ModelSection {
    pub fn base(&self) -> ModelConfig {
        ModelConfig {
            d_e: self.d_e,
            d_c: self.d_c,
            kernel: self.kernel,
            segment_len: self.segment_len,
            max_input_len: self.max_input_len,
            d_ff: self.d_ff,
            d_dec: self.d_dec,
            dec_ff: self.dec_ff,
            max_output_len: self.max_output_len,
            ..ModelConfig::new(0, 0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus synthesis and training.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ordering: OrderingStrategy,
    pub beam: usize,
    /// Decoder step budget at inference; `None` uses the model maximum.
    pub max_decode_len: Option<usize>,
    pub k_list: Vec<usize>,
    pub averaging: Averaging,
    pub min_token_count: usize,
    /// JSON list of `{"pattern", "tag"}` surrogate rules.
    pub surrogate_rules: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            ordering: OrderingStrategy::default(),
            beam: 1,
            max_decode_len: None,
            k_list: (1..=11).chain([39]).collect(),
            averaging: Averaging::Micro,
            min_token_count: 1,
            surrogate_rules: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.beam == 0 || self.beam > MAX_BEAM {
            return Err(CliError::Usage(format!("beam width must be in 1..={MAX_BEAM}, got {}", self.beam)));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(CliError::Usage("k_list must be non-empty with every K at least 1".into()));
        }
        if self.max_decode_len == Some(0) {
            return Err(CliError::Usage("max_decode_len must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            beam: self.beam,
            threshold: self.train.threshold,
            max_decode_len: self.max_decode_len,
        }
    }

    pub fn rules(&self) -> Result<SurrogateRules, CliError> {
        match &self.surrogate_rules {
            Some(p) => Ok(SurrogateRules::from_path(p)?),
            None => Ok(SurrogateRules::default()),
        }
    }
}
