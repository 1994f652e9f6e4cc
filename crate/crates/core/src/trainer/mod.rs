//! Multi-task fine-tuning of adapters and classification heads over a frozen
//! encoder.

pub mod encoder;
pub mod loss;
pub mod model;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterError;
use crate::corpus::Task;
use crate::variants::VariantExample;

pub use encoder::{resolve_encoder, EncoderBackend, HashTokenizer, Pooling, TinyEncoder, TinyEncoderConfig};
pub use loss::{class_weight_vector, class_weights, weighted_loss, LossError, TaskBatch};
pub use model::{argmax, Checkpoint, Example, Grads, Head, MultiTaskModel, Prediction};
pub use optim::{schedule, AdamW, AdamWConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("vocabulary mismatch for task {task}: {reason}")]
    VocabMismatch { task: String, reason: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Inverse-frequency class weights computed on the training split.
    #[default]
    ClassWeighted,
    /// Unweighted mean cross-entropy.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 4, epochs: 25, seed: 42, loss: LossMode::ClassWeighted, optimizer: AdamWConfig::default() }
    }
}

pub fn steps_per_epoch(examples: usize, batch_size: usize) -> usize {
    examples.div_ceil(batch_size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: BTreeMap<Task, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub tasks: Vec<Task>,
    pub epochs: Vec<EpochLog>,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss");
        for t in &self.tasks {
            write!(out, ",val_acc_{}", t.as_str()).unwrap();
        }
        out.push('\n');
        for e in &self.epochs {
            write!(out, "{},{}", e.epoch, e.train_loss).unwrap();
            for t in &self.tasks {
                match e.val_acc.get(t) {
                    Some(a) => write!(out, ",{a}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Parameters from the epoch with the highest mean validation accuracy
    /// (earliest wins ties); the final epoch when there is no validation set.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub steps: usize,
}

fn mismatch(task: Task, reason: impl Into<String>) -> TrainError {
    TrainError::VocabMismatch { task: task.as_str().to_string(), reason: reason.into() }
}

/// Tokenize examples and map labels to head indices.
pub fn encode_examples<E: EncoderBackend>(
    model: &MultiTaskModel<E>,
    examples: &[VariantExample],
) -> Result<Vec<Example>, TrainError> {
    for &task in &model.tasks {
        let classes = model.labels.get(&task).map_or(0, Vec::len);
        let head = model.heads.get(&task).ok_or_else(|| mismatch(task, "no head"))?;
        if head.classes() != classes {
            return Err(mismatch(task, format!("head has {} outputs, vocabulary has {classes}", head.classes())));
        }
    }
    examples
        .iter()
        .map(|ex| {
            let targets = model
                .tasks
                .iter()
                .map(|&task| {
                    let label = ex
                        .labels
                        .get(task)
                        .ok_or_else(|| mismatch(task, format!("record `{}` has no label", ex.record_id)))?;
                    model.labels[&task]
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| mismatch(task, format!("label `{label}` is not in the head vocabulary")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Example { ids: model.encoder.tokenize(&ex.input_text), targets })
        })
        .collect()
}

/// Per-task accuracy of the model on encoded examples.
pub fn accuracy_by_task<E: EncoderBackend>(model: &MultiTaskModel<E>, examples: &[Example]) -> BTreeMap<Task, f64> {
    let mut correct = vec![0usize; model.tasks.len()];
    for ex in examples {
        let p = model.predict_ids(&ex.ids);
        for (ti, task) in model.tasks.iter().enumerate() {
            correct[ti] += usize::from(p.labels[task] == ex.targets[ti]);
        }
    }
    model.tasks.iter().zip(correct).map(|(t, c)| (*t, c as f64 / examples.len() as f64)).collect()
}

pub fn train<E: EncoderBackend>(
    model: &mut MultiTaskModel<E>,
    train_set: &[VariantExample],
    val_set: &[VariantExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let train_ex = encode_examples(model, train_set)?;
    let val_ex = encode_examples(model, val_set)?;
    let batch_size = cfg.batch_size.max(1);

    let weights: BTreeMap<Task, Vec<f64>> = model
        .tasks
        .iter()
        .enumerate()
        .map(|(ti, &task)| {
            let classes = model.labels[&task].len();
            let w = match cfg.loss {
                LossMode::ClassWeighted => {
                    let targets: Vec<usize> = train_ex.iter().map(|e| e.targets[ti]).collect();
                    class_weight_vector(classes, &targets)
                }
                LossMode::Plain => vec![1.0; classes],
            };
            (task, w)
        })
        .collect();

    let per_epoch = steps_per_epoch(train_ex.len(), batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), total);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_ex.len()).collect();

    let mut log = TrainLog { tasks: model.tasks.clone(), epochs: Vec::new(), steps_per_epoch: per_epoch, total_steps: total };
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_ex[i].clone()).collect();
            let (loss, grads) = model.loss_and_grads(&batch, &weights, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            model.apply(&mut opt, &grads);
            loss_sum += loss;
        }
        let val_acc = if val_ex.is_empty() { BTreeMap::new() } else { accuracy_by_task(model, &val_ex) };
        let train_loss = loss_sum / per_epoch as f64;
        log::info!("epoch {epoch}/{}: loss {train_loss:.4} val {val_acc:?}", cfg.epochs);
        if !val_acc.is_empty() {
            let avg = val_acc.values().sum::<f64>() / val_acc.len() as f64;
            if best.as_ref().is_none_or(|(b, _, _)| avg > *b) {
                best = Some((avg, epoch, model.checkpoint()));
            }
        }
        log.epochs.push(EpochLog { epoch, train_loss, val_acc });
    }
    let last = model.checkpoint();
    let (best_epoch, best) = match best {
        Some((_, e, c)) => (e, c),
        None => (cfg.epochs, last.clone()),
    };
    Ok(TrainOutcome { log, best, best_epoch, last, steps: opt.steps_taken() })
}
