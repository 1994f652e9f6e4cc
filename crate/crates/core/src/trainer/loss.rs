//! Class weighting and the multi-task weighted cross-entropy.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("class `{0}` has no training examples")]
    EmptyClass(String),
    #[error("target {target} out of range for {classes} classes (task {task}, row {row})")]
    IndexOutOfVocab { task: usize, row: usize, target: usize, classes: usize },
    #[error("task {task}: {reason}")]
    Shape { task: usize, reason: String },
}

/// Inverse-frequency weights: `N / (K * count(c))`.
pub fn class_weights(counts: &BTreeMap<String, usize>) -> Result<BTreeMap<String, f64>, LossError> {
    if let Some((name, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(LossError::EmptyClass(name.clone()));
    }
    let total: usize = counts.values().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|(c, &n)| (c.clone(), total as f64 / (k * n as f64))).collect())
}

/// Per-index weights over a label vocabulary. Classes absent from `targets`
/// get weight 1; they never appear as a target so the value is unused.
pub fn class_weight_vector(classes: usize, targets: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &t in targets {
        counts[t] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let total = targets.len() as f64;
    counts.iter().map(|&n| if n == 0 { 1.0 } else { total / (present * n as f64) }).collect()
}

/// One task's batch: logits `(batch, K)`, target indices and per-class weights.
pub struct TaskBatch<'a> {
    pub logits: ArrayView2<'a, f64>,
    pub targets: &'a [usize],
    pub weights: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub per_task: Vec<f64>,
    /// d loss / d logits, one matrix per task.
    pub grads: Vec<Array2<f64>>,
}

/// Sum over tasks of the class-weighted mean cross-entropy, where each task is
/// normalized by the total weight of its batch targets.
pub fn weighted_loss(tasks: &[TaskBatch<'_>]) -> Result<LossOutput, LossError> {
    let mut out = LossOutput { loss: 0.0, per_task: Vec::new(), grads: Vec::new() };
    for (ti, tb) in tasks.iter().enumerate() {
        let (n, k) = tb.logits.dim();
        if tb.targets.len() != n || tb.weights.len() != k {
            return Err(LossError::Shape {
                task: ti,
                reason: format!("{n} rows, {} targets, {k} classes, {} weights", tb.targets.len(), tb.weights.len()),
            });
        }
        if let Some((row, &target)) = tb.targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(LossError::IndexOutOfVocab { task: ti, row, target, classes: k });
        }
        let norm: f64 = tb.targets.iter().map(|&t| tb.weights[t]).sum();
        let mut grad = Array2::zeros((n, k));
        let mut loss = 0.0;
        for (i, row) in tb.logits.outer_iter().enumerate() {
            let y = tb.targets[i];
            let w = tb.weights[y] / norm;
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += w * (lse - row[y]);
            for (j, &v) in row.iter().enumerate() {
                grad[[i, j]] = w * ((v - lse).exp() - if j == y { 1.0 } else { 0.0 });
            }
        }
        out.loss += loss;
        out.per_task.push(loss);
        out.grads.push(grad);
    }
    Ok(out)
}
