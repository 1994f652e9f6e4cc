//! Dataset variants: each record's normal text, optionally followed by the
//! `[AUX]` separator and one preprocessing output.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{corpus_hash, ComplaintRecord, LabelSet};
use crate::fsutil;
use crate::preprocess::{BundleStore, PreprocessBundle};

pub const AUX_SEPARATOR: &str = "[AUX]";
/// Joiner for entity surfaces under the `ner` condition (Arabic comma).
pub const ENTITY_JOINER: &str = "، ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Normal,
    Refined,
    Summarized,
    Ner,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Normal, Condition::Refined, Condition::Summarized, Condition::Ner];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Refined => "refined",
            Condition::Summarized => "summarized",
            Condition::Ner => "ner",
        }
    }

    /// Row label used in rendered reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Condition::Normal => "Normal Text",
            Condition::Refined => "With Refined",
            Condition::Summarized => "With Summarized",
            Condition::Ner => "With NER",
        }
    }

    fn aux_text(self, bundle: &PreprocessBundle) -> String {
        match self {
            Condition::Normal => String::new(),
            Condition::Refined => bundle.refined.trim().to_string(),
            Condition::Summarized => bundle.summarized.trim().to_string(),
            Condition::Ner => bundle
                .entities
                .iter()
                .map(|e| e.surface.as_str())
                .collect::<Vec<_>>()
                .join(ENTITY_JOINER),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown condition `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantExample {
    pub record_id: String,
    pub input_text: String,
    pub labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub condition: Condition,
    pub corpus_hash: String,
    pub bundle_hash: String,
    pub examples: usize,
    /// Records that fell back to normal text because their auxiliary text was empty.
    pub empty_aux: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetVariant {
    pub condition: Condition,
    pub examples: Vec<VariantExample>,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum VariantError {
    #[error("no preprocessing bundle for record `{0}`")]
    MissingBundle(String),
    #[error("variant i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed variant file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// Where bundles come from when building a variant.
pub trait BundleSource {
    fn bundle(&self, record_id: &str) -> Option<PreprocessBundle>;

    fn bundles_hash(&self, ids: &[&str]) -> String {
        let blobs: Vec<Vec<u8>> = ids
            .iter()
            .map(|id| self.bundle(id).map(|b| serde_json::to_vec(&b).unwrap()).unwrap_or_default())
            .collect();
        fsutil::sha256_chunks(blobs.iter().map(Vec::as_slice))
    }
}

impl BundleSource for BundleStore {
    fn bundle(&self, record_id: &str) -> Option<PreprocessBundle> {
        self.load(record_id)
    }
}

impl BundleSource for HashMap<String, PreprocessBundle> {
    fn bundle(&self, record_id: &str) -> Option<PreprocessBundle> {
        self.get(record_id).cloned()
    }
}

impl BundleSource for [PreprocessBundle] {
    fn bundle(&self, record_id: &str) -> Option<PreprocessBundle> {
        self.iter().find(|b| b.record_id == record_id).cloned()
    }
}

/// Build one condition's dataset, ordered by record id.
pub fn build_variant<S: BundleSource + ?Sized>(
    records: &[ComplaintRecord],
    bundles: &S,
    condition: Condition,
) -> Result<DatasetVariant, VariantError> {
    let mut sorted: Vec<&ComplaintRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut examples = Vec::with_capacity(sorted.len());
    let mut empty_aux = Vec::new();
    for rec in &sorted {
        let aux = if condition == Condition::Normal {
            String::new()
        } else {
            let bundle = bundles.bundle(&rec.id).ok_or_else(|| VariantError::MissingBundle(rec.id.clone()))?;
            let aux = condition.aux_text(&bundle);
            if aux.is_empty() {
                empty_aux.push(rec.id.clone());
            }
            aux
        };
        let input_text = if aux.is_empty() {
            rec.text.clone()
        } else {
            format!("{} {AUX_SEPARATOR} {aux}", rec.text)
        };
        examples.push(VariantExample { record_id: rec.id.clone(), input_text, labels: rec.labels.clone() });
    }
    if !empty_aux.is_empty() {
        log::info!("{condition}: {} records without auxiliary text", empty_aux.len());
    }

    let ids: Vec<&str> = sorted.iter().map(|r| r.id.as_str()).collect();
    let bundle_hash = if condition == Condition::Normal { String::new() } else { bundles.bundles_hash(&ids) };
    let provenance = Provenance {
        condition,
        corpus_hash: corpus_hash(records),
        bundle_hash,
        examples: examples.len(),
        empty_aux,
    };
    Ok(DatasetVariant { condition, examples, provenance })
}

pub fn provenance_path(path: &Path) -> PathBuf {
    path.with_extension("provenance.json")
}

/// Write `<path>` (JSONL examples) and its provenance sidecar atomically.
pub fn write_variant(path: &Path, variant: &DatasetVariant) -> Result<(), VariantError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| VariantError::Io { path: p, source }
    };
    let mut jsonl = Vec::new();
    for ex in &variant.examples {
        serde_json::to_writer(&mut jsonl, ex).expect("example serializes");
        jsonl.push(b'\n');
    }
    fsutil::write_atomic(path, &jsonl).map_err(io(path))?;
    let mut prov = serde_json::to_vec_pretty(&variant.provenance).expect("provenance serializes");
    prov.push(b'\n');
    let ppath = provenance_path(path);
    fsutil::write_atomic(&ppath, &prov).map_err(io(&ppath))
}

pub fn read_variant(path: &Path) -> Result<DatasetVariant, VariantError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| VariantError::Io { path: p, source }
    };
    let malformed = |p: &Path, reason: String| VariantError::Malformed { path: p.to_path_buf(), reason };
    let text = fs::read_to_string(path).map_err(io(path))?;
    let examples = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<VariantExample>(l).map_err(|e| malformed(path, e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let ppath = provenance_path(path);
    let provenance: Provenance = serde_json::from_slice(&fs::read(&ppath).map_err(io(&ppath))?)
        .map_err(|e| malformed(&ppath, e.to_string()))?;
    Ok(DatasetVariant { condition: provenance.condition, examples, provenance })
}
