//! Corruptions for denoising pretraining: token masking, token deletion and
//! span infilling with Poisson-distributed span lengths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vocab::MASK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mask_ratio: f64,
    pub delete_ratio: f64,
    pub infill_lambda: f64,
    /// Number of infilled spans per function; 0 disables infilling.
    pub infill_spans: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            delete_ratio: 0.10,
            infill_lambda: 3.0,
            infill_spans: 1,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            mask_ratio: 0.0,
            delete_ratio: 0.0,
            infill_lambda: 3.0,
            infill_spans: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NoiseError {
    #[error("cannot add noise to an empty token sequence")]
    Empty,
}

pub fn sample_infill_length<R: Rng>(rng: &mut R, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

/// Returns `(noised, original)`. Infilling runs first, then masking, then
/// deletion. Deletion never empties the sequence. Equal seeds give
/// identical output.
pub fn make_noise<S: AsRef<str>>(
    tokens: &[S],
    config: &NoiseConfig,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), NoiseError> {
    if tokens.is_empty() {
        return Err(NoiseError::Empty);
    }
    let original: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noised = original.clone();
    for _ in 0..config.infill_spans {
        let len = sample_infill_length(&mut rng, config.infill_lambda).min(noised.len());
        let start = rng.gen_range(0..=noised.len() - len);
        noised.splice(start..start + len, [MASK.to_string()]);
    }
    if config.mask_ratio > 0.0 {
        for t in noised.iter_mut() {
            if rng.gen::<f64>() < config.mask_ratio {
                *t = MASK.to_string();
            }
        }
    }
    if config.delete_ratio > 0.0 {
        let keep: Vec<bool> = noised
            .iter()
            .map(|_| rng.gen::<f64>() >= config.delete_ratio)
            .collect();
        if keep.iter().any(|&k| k) {
            noised = noised
                .into_iter()
                .zip(keep)
                .filter_map(|(t, k)| k.then_some(t))
                .collect();
        } else {
            noised.truncate(1);
        }
    }
    Ok((noised, original))
}
