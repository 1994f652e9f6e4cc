//! Low-rank adapters for frozen weight matrices.
//!
//! An adapter on a weight `W` (`d_out × d_in`) holds `A` (`r × d_in`) and `B`
//! (`d_out × r`) and contributes `(alpha / r) · B · A · drop(x)` on top of the
//! frozen projection `W · x`. `B` starts at zero so a fresh adapter leaves the
//! model unchanged. Dropout is inverted: kept inputs are scaled by `1/(1-p)`
//! during training and evaluation needs no rescaling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 8.0;
pub const DEFAULT_DROPOUT: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")]
    RankTooLarge { rank: usize, d_in: usize, d_out: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid adapter hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

fn mismatch(expected: impl ToString, got: impl ToString) -> AdapterError {
    AdapterError::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
}

/// Whether dropout is active. Training draws masks from the given RNG.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_rate: f64,
    /// An adapter is attached to every weight whose name contains one of these.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            dropout_rate: DEFAULT_DROPOUT,
            targets: vec!["query".into(), "value".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target_name: String,
    /// `r × d_in`
    pub a: Array2<f64>,
    /// `d_out × r`
    pub b: Array2<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_rate: f64,
}

/// Fresh adapter: `A` from N(0, (1/r)²), `B` zero. Deterministic in `seed`.
pub fn init_adapter(
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    dropout_rate: f64,
    seed: u64,
) -> Result<LoraAdapter, AdapterError> {
    if rank == 0 {
        return Err(AdapterError::InvalidHyperparameter("rank must be positive".into()));
    }
    if rank > d_in.min(d_out) {
        return Err(AdapterError::RankTooLarge { rank, d_in, d_out });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AdapterError::InvalidHyperparameter(format!("alpha {alpha}")));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(AdapterError::InvalidHyperparameter(format!("dropout {dropout_rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / rank as f64).expect("valid std");
    let a = Array2::from_shape_simple_fn((rank, d_in), || normal.sample(&mut rng));
    let b = Array2::zeros((d_out, rank));
    Ok(LoraAdapter { target_name: String::new(), a, b, rank, alpha, dropout_rate })
}

impl LoraAdapter {
    pub fn named(mut self, target: impl Into<String>) -> Self {
        self.target_name = target.into();
        self
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    /// `alpha / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Inverted-dropout mask over the input features: entries are 0 or `1/(1-p)`.
    pub fn dropout_mask(&self, rng: &mut dyn RngCore) -> Array1<f64> {
        let p = self.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        Array1::from_shape_simple_fn(self.d_in(), || if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { keep })
    }

    /// `(alpha/r) · B · A · x`, without dropout.
    pub fn delta(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.b.dot(&self.a.dot(&x)) * self.scaling()
    }

    pub fn adapted_forward(
        &self,
        base_output: ArrayView1<f64>,
        x: ArrayView1<f64>,
        mode: Mode<'_>,
    ) -> Result<Array1<f64>, AdapterError> {
        if x.len() != self.d_in() {
            return Err(mismatch(format!("x of length {}", self.d_in()), x.len()));
        }
        if base_output.len() != self.d_out() {
            return Err(mismatch(format!("base output of length {}", self.d_out()), base_output.len()));
        }
        let delta = match mode {
            Mode::Eval => self.delta(x),
            Mode::Train(rng) => {
                let mask = self.dropout_mask(rng);
                self.delta((&x * &mask).view())
            }
        };
        Ok(&base_output + &delta)
    }

    /// Row-wise [`adapted_forward`](Self::adapted_forward) over a batch.
    pub fn adapted_forward_rows(
        &self,
        base_output: ArrayView2<f64>,
        x: ArrayView2<f64>,
        mut mode: Mode<'_>,
    ) -> Result<Array2<f64>, AdapterError> {
        if x.nrows() != base_output.nrows() {
            return Err(mismatch(format!("{} rows", x.nrows()), base_output.nrows()));
        }
        let mut out = Array2::zeros((x.nrows(), self.d_out()));
        for (i, (xr, br)) in x.axis_iter(Axis(0)).zip(base_output.axis_iter(Axis(0))).enumerate() {
            let m = match &mut mode {
                Mode::Eval => Mode::Eval,
                Mode::Train(rng) => Mode::Train(&mut **rng),
            };
            out.row_mut(i).assign(&self.adapted_forward(br, xr, m)?);
        }
        Ok(out)
    }

    /// `W + (alpha/r) · B · A`.
    pub fn merge(&self, w: ArrayView2<f64>) -> Result<Array2<f64>, AdapterError> {
        if w.dim() != (self.d_out(), self.d_in()) {
            return Err(mismatch(format!("{:?}", (self.d_out(), self.d_in())), format!("{:?}", w.dim())));
        }
        Ok(&w + &(self.b.dot(&self.a) * self.scaling()))
    }
}

/// Adapters keyed by the name of the weight they modify.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub frozen_base: bool,
}

impl AdapterSet {
    /// One adapter per weight in `weights` (name, d_out, d_in) whose name
    /// matches a configured target pattern.
    pub fn for_targets(
        weights: &[(String, usize, usize)],
        cfg: &LoraConfig,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        let mut adapters = BTreeMap::new();
        for (i, (name, d_out, d_in)) in weights.iter().enumerate() {
            if cfg.targets.iter().any(|t| name.contains(t.as_str())) {
                let s = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let a = init_adapter(*d_in, *d_out, cfg.rank, cfg.alpha, cfg.dropout_rate, s)?.named(name);
                adapters.insert(name.clone(), a);
            }
        }
        Ok(Self { adapters, frozen_base: true })
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

/// Parameters with gradient enabled: every adapter's `A` and `B` plus the
/// classification heads.
pub fn count_trainable(adapters: &AdapterSet, heads: &[HeadShape]) -> usize {
    let lora: usize = adapters.adapters.values().map(LoraAdapter::param_count).sum();
    let head: usize = heads.iter().map(|h| h.d_in * h.d_out + if h.bias { h.d_out } else { 0 }).sum();
    lora + head
}
