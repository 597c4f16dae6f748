//! JSON checkpoints: config, vocabulary, step and every named tensor.
//!
//! Floats are written with shortest round-trip formatting and parsed back
//! exactly, so save followed by load is bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::vocab::{VocabError, Vocabulary};

use super::model::Model;
use super::tape::Mat;
use super::{ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    step: u64,
    tensors: Vec<Tensor>,
}

const FORMAT: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let file = File {
        format: FORMAT,
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        step: model.step,
        tensors: model
            .names()
            .iter()
            .zip(model.params())
            .map(|(name, m)| Tensor {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().copied().collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).map_err(|source| CheckpointError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: File = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if file.format != FORMAT {
        return Err(ModelError::Config(format!("unsupported checkpoint format {}", file.format)).into());
    }
    let vocab = Vocabulary::from_tokens(file.vocab)?;
    let mut tensors = Vec::with_capacity(file.tensors.len());
    for t in file.tensors {
        let m = Mat::from_shape_vec((t.rows, t.cols), t.data)
            .map_err(|e| ModelError::Shape(format!("tensor {}: {e}", t.name)))?;
        tensors.push((t.name, m));
    }
    Ok(Model::from_tensors(file.config, vocab, file.step, tensors)?)
}
