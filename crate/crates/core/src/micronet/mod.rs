//! A small encoder-decoder Transformer with a copy pathway.
//!
//! Everything runs in `f64` on the CPU. Gradients come from the reverse-mode
//! tape in [`tape`]; the model itself lives in [`model`].

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod model;
pub mod tape;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{lr_at, Adam, LrSchedule};
pub use batch::Batch;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use model::{Memory, Model, StepDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ff_dim: 128,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_positions: 1024,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.num_layers,
            self.num_heads,
            self.model_dim,
            self.ff_dim,
            self.max_positions,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ModelError::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
}

/// `softmax(Q K^T / sqrt(d_k) + M) V` for a single head, where `mask[i][j]`
/// false means query `i` may not see key `j`. A query that sees no key
/// yields a zero row.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: Option<&Array2<bool>>,
) -> Result<Array2<f64>, ModelError> {
    if q.ncols() != k.ncols() {
        return Err(ModelError::Shape(format!(
            "query width {} vs key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(ModelError::Shape(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if let Some(m) = mask {
        if m.dim() != (q.nrows(), k.nrows()) {
            return Err(ModelError::Shape(format!(
                "mask {:?} vs scores {:?}",
                m.dim(),
                (q.nrows(), k.nrows())
            )));
        }
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        if let Some(m) = mask {
            for (j, e) in row.iter_mut().enumerate() {
                if !m[[i, j]] {
                    *e = f64::NEG_INFINITY;
                }
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|e| (e - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(scores.dot(v))
}
