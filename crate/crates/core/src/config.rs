//! One JSON document configuring every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcodec::DEFAULT_CONTEXT_SIZE;
use crate::encoding::{LocalizationMode, NoiseConfig};
use crate::inference::{DEFAULT_BEAM_WIDTH, DEFAULT_MAX_LEN};
use crate::micronet::ModelConfig;
use crate::mining::MiningConfig;
use crate::training::{SplitSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The lexer takes no options; the section is accepted so configs can carry it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub context_size: usize,
    /// Most interpretations kept per diff.
    pub interpretation_cap: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            context_size: DEFAULT_CONTEXT_SIZE,
            interpretation_cap: DEFAULT_BEAM_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub vocab_size: usize,
    pub cwe_coverage: f64,
    pub localization_mode: LocalizationMode,
    pub noise: NoiseConfig,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5000,
            cwe_coverage: 0.8,
            localization_mode: LocalizationMode::FirstLine,
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerConfig,
    pub codec: CodecConfig,
    pub mining: MiningConfig,
    pub encoding: EncodingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub split: SplitSpec,
    /// Root seed for splitting, noise, initialization and dropout.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        let config = Self::from_json(&text).map_err(|source| ConfigError::Json { path: shown, source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.codec.context_size == 0 {
            return bad("codec.context_size must be positive".into());
        }
        if self.codec.interpretation_cap == 0 {
            return bad("codec.interpretation_cap must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.encoding.cwe_coverage) {
            return bad(format!("encoding.cwe_coverage {} is outside [0, 1]", self.encoding.cwe_coverage));
        }
        if self.infer.beam_width == 0 {
            return bad("infer.beam_width must be positive".into());
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
