//! Encoder plus adapters plus one linear head per task.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoder::{AdapterGrads, EncoderBackend, Pooling};
use super::loss::{weighted_loss, LossError, TaskBatch};
use super::optim::AdamW;
use super::TrainError;
use crate::adapter::{count_trainable, AdapterError, AdapterSet, HeadShape, LoraConfig};
use crate::corpus::Task;
use crate::fsutil;

const HEAD_INIT_STD: f64 = 0.02;
pub const CHECKPOINT_FORMAT: &str = "medcascade-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// `(classes, d_model)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Head {
    pub fn init(classes: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, HEAD_INIT_STD).unwrap();
        Self {
            weight: Array2::from_shape_simple_fn((classes, d_model), || normal.sample(rng)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, pooled: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(pooled) + &self.bias
    }
}

/// A tokenized training example; `targets` follow the model's task order.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    pub adapters: AdapterGrads,
    /// `(dW, db)` per task.
    pub heads: BTreeMap<Task, (Array2<f64>, Array1<f64>)>,
}

impl Grads {
    fn add_adapters(&mut self, other: AdapterGrads) {
        for (name, (da, db)) in other {
            match self.adapters.get_mut(&name) {
                Some((a, b)) => {
                    *a += &da;
                    *b += &db;
                }
                None => {
                    self.adapters.insert(name, (da, db));
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: BTreeMap<Task, usize>,
    /// Softmax probabilities per task.
    pub scores: BTreeMap<Task, Vec<f64>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(z: &Array1<f64>) -> Vec<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug)]
pub struct MultiTaskModel<E> {
    pub encoder: E,
    pub adapters: AdapterSet,
    pub heads: BTreeMap<Task, Head>,
    pub tasks: Vec<Task>,
    pub labels: BTreeMap<Task, Vec<String>>,
    pub pooling: Pooling,
}

impl<E: EncoderBackend> MultiTaskModel<E> {
    /// Fresh adapters (B = 0) and randomly initialized heads, one per task.
    pub fn new(
        encoder: E,
        labels: BTreeMap<Task, Vec<String>>,
        tasks: &[Task],
        lora: &LoraConfig,
        pooling: Pooling,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        let adapters = AdapterSet::for_targets(&encoder.weight_shapes(), lora, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let heads = tasks
            .iter()
            .map(|&t| (t, Head::init(labels.get(&t).map_or(0, Vec::len), encoder.d_model(), &mut rng)))
            .collect();
        Ok(Self { encoder, adapters, heads, tasks: tasks.to_vec(), labels, pooling })
    }

    pub fn trainable_params(&self) -> usize {
        let shapes: Vec<HeadShape> = self
            .heads
            .values()
            .map(|h| HeadShape { d_in: h.weight.ncols(), d_out: h.classes(), bias: true })
            .collect();
        count_trainable(&self.adapters, &shapes)
    }

    pub fn logits(&self, ids: &[u32]) -> BTreeMap<Task, Array1<f64>> {
        let pooled = self.encoder.encode(ids, &self.adapters, self.pooling);
        self.tasks.iter().map(|t| (*t, self.heads[t].logits(&pooled))).collect()
    }

    pub fn predict_ids(&self, ids: &[u32]) -> Prediction {
        let mut p = Prediction { labels: BTreeMap::new(), scores: BTreeMap::new() };
        for (task, z) in self.logits(ids) {
            p.labels.insert(task, argmax(z.as_slice().expect("contiguous")));
            p.scores.insert(task, softmax(&z));
        }
        p
    }

    pub fn predict(&self, texts: &[&str]) -> Vec<Prediction> {
        texts.iter().map(|t| self.predict_ids(&self.encoder.tokenize(t))).collect()
    }

    /// Batch loss and gradients for every trainable tensor. `weights[task]`
    /// holds per-class loss weights.
    pub fn loss_and_grads(
        &self,
        batch: &[Example],
        weights: &BTreeMap<Task, Vec<f64>>,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Grads), LossError> {
        let mut pooled = Vec::with_capacity(batch.len());
        let mut traces = Vec::with_capacity(batch.len());
        for ex in batch {
            let rng = dropout.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let (p, tr) = self.encoder.forward_train(&ex.ids, &self.adapters, self.pooling, rng);
            pooled.push(p);
            traces.push(tr);
        }
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for (ti, task) in self.tasks.iter().enumerate() {
            let head = &self.heads[task];
            let mut m = Array2::zeros((batch.len(), head.classes()));
            for (i, p) in pooled.iter().enumerate() {
                m.row_mut(i).assign(&head.logits(p));
            }
            logits.push(m);
            targets.push(batch.iter().map(|e| e.targets[ti]).collect::<Vec<_>>());
        }
        let task_batches: Vec<TaskBatch<'_>> = self
            .tasks
            .iter()
            .enumerate()
            .map(|(ti, t)| TaskBatch { logits: logits[ti].view(), targets: &targets[ti], weights: &weights[t] })
            .collect();
        let out = weighted_loss(&task_batches)?;

        let mut grads = Grads::default();
        let d = self.encoder.d_model();
        for (ti, task) in self.tasks.iter().enumerate() {
            let g = &out.grads[ti];
            let dw = g.t().dot(&ndarray::stack(Axis(0), &pooled.iter().map(|p| p.view()).collect::<Vec<_>>()).unwrap());
            grads.heads.insert(*task, (dw, g.sum_axis(Axis(0))));
        }
        for (i, tr) in traces.iter().enumerate() {
            let mut dp = Array1::zeros(d);
            for (ti, task) in self.tasks.iter().enumerate() {
                dp += &self.heads[task].weight.t().dot(&out.grads[ti].row(i));
            }
            grads.add_adapters(self.encoder.backward(tr, &self.adapters, dp.view()));
        }
        Ok((out.loss, grads))
    }

    /// One optimizer step over adapters (in name order) and heads (in task order).
    pub fn apply(&mut self, opt: &mut AdamW, grads: &Grads) {
        for (name, ad) in self.adapters.adapters.iter_mut() {
            if let Some((da, db)) = grads.adapters.get(name) {
                opt.update(&format!("{name}.A"), ad.a.as_slice_mut().unwrap(), da.as_slice().unwrap());
                opt.update(&format!("{name}.B"), ad.b.as_slice_mut().unwrap(), db.as_slice().unwrap());
            }
        }
        for task in &self.tasks {
            let head = self.heads.get_mut(task).expect("head per task");
            let (dw, db) = &grads.heads[task];
            opt.update(&format!("head.{}.W", task.as_str()), head.weight.as_slice_mut().unwrap(), dw.as_slice().unwrap());
            opt.update(&format!("head.{}.b", task.as_str()), head.bias.as_slice_mut().unwrap(), db.as_slice().unwrap());
        }
        opt.finish_step();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            encoder_id: self.encoder.id().to_string(),
            pooling: self.pooling,
            tasks: self.tasks.clone(),
            labels: self.labels.clone(),
            adapters: self.adapters.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        if ckpt.encoder_id != self.encoder.id() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint is for encoder `{}`, model uses `{}`",
                ckpt.encoder_id,
                self.encoder.id()
            )));
        }
        let d = self.encoder.d_model();
        for (name, d_out, d_in) in self.encoder.weight_shapes() {
            if let Some(a) = ckpt.adapters.get(&name) {
                if a.d_in() != d_in || a.d_out() != d_out {
                    return Err(TrainError::Checkpoint(format!("adapter `{name}` has the wrong shape")));
                }
            }
        }
        for (task, head) in &ckpt.heads {
            let classes = ckpt.labels.get(task).map_or(0, Vec::len);
            if head.weight.dim() != (classes, d) || head.bias.len() != classes {
                return Err(TrainError::Checkpoint(format!("head `{}` has the wrong shape", task.as_str())));
            }
        }
        self.adapters = ckpt.adapters.clone();
        self.heads = ckpt.heads.clone();
        self.tasks = ckpt.tasks.clone();
        self.labels = ckpt.labels.clone();
        self.pooling = ckpt.pooling;
        Ok(())
    }
}

/// Trained parameters only; the frozen encoder is rebuilt from its config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder_id: String,
    pub pooling: Pooling,
    pub tasks: Vec<Task>,
    pub labels: BTreeMap<Task, Vec<String>>,
    pub adapters: AdapterSet,
    pub heads: BTreeMap<Task, Head>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = serde_json::to_vec(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fsutil::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)?;
        let c: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unexpected format `{}`", c.format)));
        }
        Ok(c)
    }
}
