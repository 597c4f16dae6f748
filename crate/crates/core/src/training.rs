//! Dataset splits and the train / tune / denoise loops with early stopping.

use std::collections::HashSet;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::vocab::Vocabulary;
use crate::encoding::Sample;
use crate::evalrep;
use crate::inference::{greedy_batch, neural_beam, ModelScorer};
use crate::micronet::{Adam, Batch, LrSchedule, Model, ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub target_lr_factor: f64,
    pub schedule: LrSchedule,
    /// Beam width of the validation metric.
    pub eval_beam: usize,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            batch_size: 32,
            eval_interval: 500,
            patience: 2,
            max_steps: 20_000,
            seed: 0,
            target_lr_factor: 0.1,
            schedule: LrSchedule::default(),
            eval_beam: 1,
            max_decode_len: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_beam == 0 {
            return bad("batch_size, eval_interval and eval_beam must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.target_lr_factor > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    Empty,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize, last_finite: Box<Model> },
    #[error("checkpoint vocabulary differs from the supplied vocabulary")]
    VocabMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("split: {0}")]
    Split(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    Random {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
    Time {
        val_start: NaiveDate,
        test_start: NaiveDate,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Random {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn sample_key(s: &Sample) -> (Vec<String>, Vec<String>) {
    (s.input.clone(), s.target.clone())
}

/// Partitions samples. Random splits shuffle with the seed and cut at the
/// rounded fractions, the test split taking the remainder. Time splits put
/// samples dated before `val_start` in train and before `test_start` in
/// val. Samples identical to one in a later split are then dropped from
/// train, and from val when they repeat a test sample.
pub fn split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Splits, TrainError> {
    let mut out = Splits::default();
    match spec {
        SplitSpec::Random {
            train,
            val,
            test,
            seed,
        } => {
            let fracs = [*train, *val, *test];
            if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(TrainError::Split("fractions must be in [0, 1] and sum to 1".into()));
            }
            let mut samples = samples;
            samples.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n = samples.len() as f64;
            let n_train = ((train * n).round() as usize).min(samples.len());
            let n_val = ((val * n).round() as usize).min(samples.len() - n_train);
            out.test = samples.split_off(n_train + n_val);
            out.val = samples.split_off(n_train);
            out.train = samples;
        }
        SplitSpec::Time {
            val_start,
            test_start,
        } => {
            if val_start > test_start {
                return Err(TrainError::Split("val_start must not follow test_start".into()));
            }
            for s in samples {
                let Some(date) = s.meta.date else {
                    return Err(TrainError::Split("time split needs a date on every sample".into()));
                };
                if date < *val_start {
                    out.train.push(s);
                } else if date < *test_start {
                    out.val.push(s);
                } else {
                    out.test.push(s);
                }
            }
        }
    }
    let test_keys: HashSet<_> = out.test.iter().map(sample_key).collect();
    out.val.retain(|s| !test_keys.contains(&sample_key(s)));
    let later: HashSet<_> = out.val.iter().map(sample_key).chain(test_keys).collect();
    out.train.retain(|s| !later.contains(&sample_key(s)));
    for (name, part) in [("train", &mut out.train), ("val", &mut out.val), ("test", &mut out.test)] {
        for s in part.iter_mut() {
            s.meta.split = Some(name.to_string());
        }
    }
    Ok(out)
}

/// Scores a model on held-out data; higher is better.
pub trait Validator {
    fn evaluate(&mut self, model: &Model) -> Result<f64, ModelError>;
}

/// Sequence-level exact match of the decoded diff at a fixed beam width.
pub struct SequenceAccuracy {
    pub inputs: Vec<Vec<String>>,
    pub targets: Vec<Vec<String>>,
    pub beam: usize,
    pub max_len: usize,
}

impl SequenceAccuracy {
    pub fn new(samples: &[Sample], beam: usize, max_len: usize) -> Self {
        Self {
            inputs: samples.iter().map(|s| s.input.clone()).collect(),
            targets: samples.iter().map(|s| s.target.clone()).collect(),
            beam,
            max_len,
        }
    }
}

/// Width-1 outputs of every input, batched.
pub fn greedy_outputs(
    model: &Model,
    inputs: &[Vec<String>],
    max_len: usize,
) -> Result<Vec<Vec<String>>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let refs: Vec<&[String]> = chunk.iter().map(Vec::as_slice).collect();
        out.extend(greedy_batch(model, &refs, max_len)?);
    }
    Ok(out)
}

impl Validator for SequenceAccuracy {
    fn evaluate(&mut self, model: &Model) -> Result<f64, ModelError> {
        let beams: Vec<Vec<Vec<String>>> = if self.beam == 1 {
            greedy_outputs(model, &self.inputs, self.max_len)?
                .into_iter()
                .map(|o| vec![o])
                .collect()
        } else {
            let mut beams = Vec::with_capacity(self.inputs.len());
            for input in &self.inputs {
                let scorer = ModelScorer::new(model, input)?;
                let hyps = neural_beam(&scorer, self.beam, self.max_len)?;
                beams.push(hyps.into_iter().filter(|h| h.finished).map(|h| h.tokens).collect());
            }
            beams
        };
        Ok(evalrep::sequence_accuracy(&beams, &self.targets).expect("aligned"))
    }
}

/// Negated mean token loss on held-out pairs. Exact match is near zero
/// for reconstruction targets, so denoising selects checkpoints on this.
pub struct NegativeLoss {
    pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl NegativeLoss {
    pub fn new(samples: &[Sample]) -> Self {
        Self {
            pairs: samples.iter().map(|s| (s.input.clone(), s.target.clone())).collect(),
        }
    }
}

impl Validator for NegativeLoss {
    fn evaluate(&mut self, model: &Model) -> Result<f64, ModelError> {
        if self.pairs.is_empty() {
            return Ok(0.0);
        }
        let (mut total, mut weight) = (0.0, 0.0);
        for chunk in self.pairs.chunks(64) {
            let refs: Vec<(&[String], &[String])> = chunk.iter().map(|(s, t)| (&s[..], &t[..])).collect();
            let batch = Batch::new(&refs, &model.vocab);
            let n = batch.real_target_tokens() as f64;
            total += model.loss(&batch)? * n;
            weight += n;
        }
        Ok(-total / weight.max(1.0))
    }
}

/// Counts evaluations that fail to beat the best metric so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub misses: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            misses: 0,
        }
    }

    /// Only strictly consecutive misses count toward patience.
    pub fn observe(&mut self, metric: f64) -> Verdict {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.misses = 0;
            Verdict::Improved
        } else {
            self.misses += 1;
            if self.misses >= self.patience {
                Verdict::Stop
            } else {
                Verdict::NoImprovement
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_metric: Option<f64>,
    /// Local step of the best checkpoint; 0 when no evaluation ran.
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub log: Vec<LogEntry>,
}

/// One epoch of batches. Samples are shuffled, sorted by length within
/// windows of 50 batches to limit padding, cut into batches, and the batch
/// order is shuffled again.
fn epoch_batches(train: &[Sample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    for window in order.chunks_mut(batch_size * 50) {
        window.sort_by_key(|&i| (train[i].input.len(), train[i].target.len()));
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Trains `model` from its current weights with a fresh optimizer. The
/// learning rate follows `config.schedule` on this run's own step count,
/// scaled from `base_lr`. Validation runs every `eval_interval` steps and
/// after the last step.
pub fn train_loop<V: Validator + ?Sized>(
    mut model: Model,
    train: &[Sample],
    validator: &mut V,
    config: &TrainConfig,
    base_lr: f64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut adam = Adam::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut best_step = 0;
    let mut log = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 0..config.max_steps {
        if queue.is_empty() {
            queue = epoch_batches(train, config.batch_size, &mut rng);
        }
        let picked = queue.pop().expect("non-empty epoch");
        let pairs: Vec<(&[String], &[String])> = picked
            .iter()
            .map(|&i| (train[i].input.as_slice(), train[i].target.as_slice()))
            .collect();
        let batch = Batch::new(&pairs, &model.vocab);
        let dropout_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
        let (loss, grads) = match model.loss_and_grads(&batch, Some(dropout_seed)) {
            Ok(v) => v,
            Err(ModelError::NonFinite) => {
                return Err(TrainError::Diverged {
                    step,
                    last_finite: Box::new(model),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let lr = config.schedule.lr_at(step as u64, base_lr);
        adam.update(model.params_mut(), &grads, lr);
        model.step += 1;
        steps_run = step + 1;
        loss_sum += loss;
        loss_count += 1;
        if steps_run % config.eval_interval == 0 || steps_run == config.max_steps {
            let metric = validator.evaluate(&model)?;
            log.push(LogEntry {
                step: steps_run,
                train_loss: loss_sum / loss_count as f64,
                val_metric: metric,
                lr,
            });
            loss_sum = 0.0;
            loss_count = 0;
            log::info!("step {steps_run} loss {:.4} val {metric:.4} lr {lr:.2e}", log.last().unwrap().train_loss);
            match stopper.observe(metric) {
                Verdict::Improved => {
                    best = model.clone();
                    best_step = steps_run;
                }
                Verdict::NoImprovement => {}
                Verdict::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_metric: stopper.best,
        best_step,
        steps_run,
        stopped_early,
        log,
    })
}

/// Source-domain training from a fresh initialization.
pub fn train_source<V: Validator + ?Sized>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocab: Vocabulary,
    train: &[Sample],
    validator: &mut V,
) -> Result<TrainOutcome, TrainError> {
    let model = Model::new(model_config.clone(), vocab, config.seed)?;
    train_loop(model, train, validator, config, config.base_lr)
}

/// Target-domain tuning from a source checkpoint at a reduced learning
/// rate. The architecture and vocabulary are those of the checkpoint; a
/// supplied vocabulary must equal it.
pub fn tune_target<V: Validator + ?Sized>(
    source: Model,
    expected_vocab: Option<&Vocabulary>,
    config: &TrainConfig,
    train: &[Sample],
    validator: &mut V,
) -> Result<TrainOutcome, TrainError> {
    if expected_vocab.is_some_and(|v| *v != source.vocab) {
        return Err(TrainError::VocabMismatch);
    }
    let lr = config.base_lr * config.target_lr_factor;
    train_loop(source, train, validator, config, lr)
}

/// Self-supervised pre-training on noised samples; the same loop as
/// [`train_source`].
pub fn pretrain_denoise<V: Validator + ?Sized>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocab: Vocabulary,
    noised: &[Sample],
    validator: &mut V,
) -> Result<TrainOutcome, TrainError> {
    train_source(config, model_config, vocab, noised, validator)
}
