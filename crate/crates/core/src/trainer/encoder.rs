//! Text encoders that the trainer can attach adapters and heads to.
//!
//! [`TinyEncoder`] is a single-block self-attention encoder over hashed word
//! embeddings. It is small enough to train on a laptop CPU and implements the
//! full backward pass for its query/key/value adapters.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::adapter::AdapterSet;
use crate::lexicon::word_tokens;
use crate::variants::AUX_SEPARATOR;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const AUX_ID: u32 = 2;
const RESERVED: u32 = 3;

/// Pretrained encoders selectable by id. Their weights are not bundled.
pub const PRETRAINED_IDS: [&str; 3] = [
    "CAMeL-Lab/bert-base-arabic-camelbert-mix",
    "aubmindlab/bert-base-arabert",
    "asafaya/bert-base-arabic",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Output vector at the leading classification token.
    #[default]
    Cls,
    Mean,
}

/// Gradients for one adapter: `(dA, dB)`.
pub type AdapterGrads = BTreeMap<String, (Array2<f64>, Array2<f64>)>;

pub trait EncoderBackend {
    /// Intermediate values kept by a training forward pass for backward.
    type Trace;

    fn id(&self) -> &str;
    fn d_model(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    /// Adaptable weight matrices as `(name, d_out, d_in)`.
    fn weight_shapes(&self) -> Vec<(String, usize, usize)>;
    /// Every frozen parameter tensor, in a fixed order.
    fn base_parameters(&self) -> Vec<(String, ArrayView2<'_, f64>)>;
    fn forward_train(
        &self,
        ids: &[u32],
        adapters: &AdapterSet,
        pooling: Pooling,
        dropout: Option<&mut dyn RngCore>,
    ) -> (Array1<f64>, Self::Trace);
    fn backward(&self, trace: &Self::Trace, adapters: &AdapterSet, grad_pooled: ArrayView1<f64>) -> AdapterGrads;

    /// Deterministic pooled representation (no dropout).
    fn encode(&self, ids: &[u32], adapters: &AdapterSet, pooling: Pooling) -> Array1<f64> {
        self.forward_train(ids, adapters, pooling, None).0
    }

    /// Bytes of all frozen parameters, for freeze checks.
    fn base_parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in self.base_parameters() {
            out.extend_from_slice(name.as_bytes());
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TinyEncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 4096, d_model: 32, max_seq_len: 64, seed: 17 }
    }
}

/// Word-level tokenizer hashing words into a fixed vocabulary. The `[AUX]`
/// separator always maps to [`AUX_ID`]. When a sequence is too long the
/// auxiliary tail is cut first and the normal text last.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl HashTokenizer {
    pub fn word_id(&self, word: &str) -> u32 {
        let norm: String = word.nfc().flat_map(char::to_lowercase).collect();
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in norm.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        RESERVED + (h % (self.vocab_size as u64 - u64::from(RESERVED))) as u32
    }

    fn words(&self, text: &str) -> Vec<u32> {
        word_tokens(text).map(|w| self.word_id(w)).collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let (normal, aux) = match text.split_once(AUX_SEPARATOR) {
            Some((n, a)) => (n, Some(a)),
            None => (text, None),
        };
        let mut normal_ids = self.words(normal);
        let mut aux_ids = aux.map(|a| self.words(a));
        let budget = self.max_len - 1;
        if let Some(a) = &mut aux_ids {
            let room = budget.saturating_sub(normal_ids.len() + 1);
            if room == 0 && normal_ids.len() + 1 > budget {
                aux_ids = None;
            } else {
                a.truncate(room);
            }
        }
        normal_ids.truncate(budget);
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(CLS_ID);
        ids.extend(normal_ids);
        if let Some(a) = aux_ids {
            ids.push(AUX_ID);
            ids.extend(a);
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyEncoder {
    pub config: TinyEncoderConfig,
    embeddings: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
}

pub const QUERY: &str = "layer0.attention.query";
pub const KEY: &str = "layer0.attention.key";
pub const VALUE: &str = "layer0.attention.value";

pub struct TinyTrace {
    x: Array2<f64>,
    /// Per adapted projection: dropped input and `Z · Aᵀ`.
    adapter_inputs: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    pooled: Array1<f64>,
    pooling: Pooling,
}

impl TinyEncoder {
    pub fn new(config: TinyEncoderConfig) -> Self {
        assert!(config.vocab_size > RESERVED as usize + 1 && config.d_model > 0 && config.max_seq_len > 1);
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let proj = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let embeddings = Array2::from_shape_simple_fn((config.vocab_size, d), || unit.sample(&mut rng));
        let mut square = || Array2::from_shape_simple_fn((d, d), || proj.sample(&mut rng));
        let (query, key, value) = (square(), square(), square());
        Self { config, embeddings, query, key, value }
    }

    pub fn tokenizer(&self) -> HashTokenizer {
        HashTokenizer { vocab_size: self.config.vocab_size, max_len: self.config.max_seq_len }
    }

    fn weight(&self, name: &str) -> &Array2<f64> {
        match name {
            QUERY => &self.query,
            KEY => &self.key,
            VALUE => &self.value,
            _ => unreachable!("unknown weight {name}"),
        }
    }

    fn project(
        &self,
        name: &str,
        x: &Array2<f64>,
        adapters: &AdapterSet,
        dropout: &mut Option<&mut dyn RngCore>,
        inputs: &mut BTreeMap<String, (Array2<f64>, Array2<f64>)>,
    ) -> Array2<f64> {
        let mut out = x.dot(&self.weight(name).t());
        if let Some(ad) = adapters.get(name) {
            let z = match dropout {
                Some(rng) => {
                    let mut z = x.clone();
                    for mut row in z.axis_iter_mut(Axis(0)) {
                        row *= &ad.dropout_mask(&mut **rng);
                    }
                    z
                }
                None => x.clone(),
            };
            let mid = z.dot(&ad.a.t());
            out.scaled_add(ad.scaling(), &mid.dot(&ad.b.t()));
            inputs.insert(name.to_string(), (z, mid));
        }
        out
    }
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

impl EncoderBackend for TinyEncoder {
    type Trace = TinyTrace;

    fn id(&self) -> &str {
        "toy"
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer().tokenize(text)
    }

    fn weight_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.config.d_model;
        [QUERY, KEY, VALUE].iter().map(|n| (n.to_string(), d, d)).collect()
    }

    fn base_parameters(&self) -> Vec<(String, ArrayView2<'_, f64>)> {
        vec![
            ("embeddings".into(), self.embeddings.view()),
            (QUERY.into(), self.query.view()),
            (KEY.into(), self.key.view()),
            (VALUE.into(), self.value.view()),
        ]
    }

    fn forward_train(
        &self,
        ids: &[u32],
        adapters: &AdapterSet,
        pooling: Pooling,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> (Array1<f64>, TinyTrace) {
        let ids: &[u32] = if ids.is_empty() { &[CLS_ID] } else { ids };
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            x.row_mut(t).assign(&self.embeddings.row(id as usize % self.config.vocab_size));
        }
        let mut inputs = BTreeMap::new();
        let q = self.project(QUERY, &x, adapters, &mut dropout, &mut inputs);
        let k = self.project(KEY, &x, adapters, &mut dropout, &mut inputs);
        let v = self.project(VALUE, &x, adapters, &mut dropout, &mut inputs);
        let mut attn = q.dot(&k.t()) / (d as f64).sqrt();
        softmax_rows(&mut attn);
        let h = &x + &attn.dot(&v);
        let u = match pooling {
            Pooling::Cls => h.row(0).to_owned(),
            Pooling::Mean => h.mean_axis(Axis(0)).expect("non-empty sequence"),
        };
        let pooled = u.mapv(f64::tanh);
        let trace = TinyTrace { x, adapter_inputs: inputs, q, k, v, attn, pooled: pooled.clone(), pooling };
        (pooled, trace)
    }

    fn backward(&self, tr: &TinyTrace, adapters: &AdapterSet, grad_pooled: ArrayView1<f64>) -> AdapterGrads {
        let t_len = tr.x.nrows();
        let d = self.config.d_model;
        let du = &grad_pooled * &tr.pooled.mapv(|p| 1.0 - p * p);
        let mut dh = Array2::zeros((t_len, d));
        match tr.pooling {
            Pooling::Cls => dh.row_mut(0).assign(&du),
            Pooling::Mean => {
                let share = &du / t_len as f64;
                for mut row in dh.axis_iter_mut(Axis(0)) {
                    row.assign(&share);
                }
            }
        }
        let d_attn = dh.dot(&tr.v.t());
        let dv = tr.attn.t().dot(&dh);
        let mut ds = &tr.attn * &d_attn;
        for (mut row, p) in ds.axis_iter_mut(Axis(0)).zip(tr.attn.axis_iter(Axis(0))) {
            let inner = row.sum();
            row.zip_mut_with(&p, |g, &pv| *g -= pv * inner);
        }
        ds /= (d as f64).sqrt();
        let dq = ds.dot(&tr.k);
        let dk = ds.t().dot(&tr.q);

        let mut grads = AdapterGrads::new();
        for (name, dproj) in [(QUERY, &dq), (KEY, &dk), (VALUE, &dv)] {
            let (Some(ad), Some((z, mid))) = (adapters.get(name), tr.adapter_inputs.get(name)) else {
                continue;
            };
            let s = ad.scaling();
            let db = dproj.t().dot(mid) * s;
            let dmid = dproj.dot(&ad.b) * s;
            let da = dmid.t().dot(z);
            grads.insert(name.to_string(), (da, db));
        }
        grads
    }
}

/// Resolve an encoder id from configuration.
pub fn resolve_encoder(id: &str, toy: &TinyEncoderConfig) -> Result<TinyEncoder, String> {
    match id {
        "toy" => Ok(TinyEncoder::new(toy.clone())),
        other if PRETRAINED_IDS.contains(&other) => Err(format!(
            "encoder `{other}` needs pretrained weights, which this build does not load; use `toy`"
        )),
        other => Err(format!("unknown encoder `{other}`")),
    }
}
