//! The five pipeline stages over a file-based artifact store.
//!
//! Each stage reads its upstream artifacts, writes its outputs atomically and
//! records a content-hash stamp of its inputs. A rerun with unchanged inputs
//! finds a matching stamp and returns without doing work.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::LoraConfig;
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::corpus::{
    load_corpus, manifest_path_for, read_manifest, scrub_pii, stratified_split, write_corpus, ComplaintRecord,
    CorpusError, CorpusFormat, CorpusManifest, SplitError, SplitInfo, Task,
};
use crate::evaluator::{evaluate, predictions_jsonl, render_report, CellResult, EvalError};
use crate::fsutil;
use crate::gateway::{Gateway, GatewayError, HttpBackend, MockBackend, ResponseCache, TokenBucket};
use crate::preprocess::{BundleStore, PreprocessError, Preprocessor};
use crate::trainer::{self, resolve_encoder, Checkpoint, MultiTaskModel, TrainError};
use crate::variants::{build_variant, read_variant, write_variant, Condition, DatasetVariant, VariantError};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const STAMP_FILE: &str = "stamp.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    ConfigInvalid(String),
    #[error("{0}")]
    MissingUpstreamArtifact(String),
    #[error("{0}")]
    EncoderUnavailable(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Variant(VariantError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::ConfigInvalid(e.to_string())
    }
}

impl From<VariantError> for PipelineError {
    fn from(e: VariantError) -> Self {
        match e {
            VariantError::MissingBundle(id) => PipelineError::MissingUpstreamArtifact(format!(
                "no preprocessing bundle for record `{id}`; run `medcascade preprocess` first"
            )),
            other => PipelineError::Variant(other),
        }
    }
}

impl PipelineError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::ConfigInvalid(_) => "ConfigInvalid",
            PipelineError::MissingUpstreamArtifact(_) => "MissingUpstreamArtifact",
            PipelineError::EncoderUnavailable(_) => "EncoderUnavailable",
            PipelineError::Corpus(_) => "CorpusInvalid",
            PipelineError::Split(_) => "SplitFailed",
            PipelineError::Gateway(_) => "GatewayFailed",
            PipelineError::Preprocess(_) => "PreprocessFailed",
            PipelineError::Variant(_) => "VariantFailed",
            PipelineError::Train(_) => "TrainFailed",
            PipelineError::Eval(_) => "EvalFailed",
            PipelineError::Io { .. } => "Io",
        }
    }

    /// 1 for problems the user can fix (config, inputs, ordering), 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_)
            | PipelineError::MissingUpstreamArtifact(_)
            | PipelineError::EncoderUnavailable(_)
            | PipelineError::Corpus(_)
            | PipelineError::Split(_)
            | PipelineError::Gateway(_)
            | PipelineError::Train(TrainError::VocabMismatch { .. } | TrainError::EmptyDataset) => 1,
            _ => 2,
        }
    }

    /// `error[Category]: message` on one line.
    pub fn one_line(&self) -> String {
        format!("error[{}]: {}", self.category(), self.to_string().replace('\n', " "))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn read(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    /// Inputs matched the previous run; nothing was rewritten.
    pub up_to_date: bool,
    pub summary: String,
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    inputs: String,
}

fn stamp_matches(dir: &Path, key: &str) -> bool {
    fs::read(dir.join(STAMP_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<Stamp>(&b).ok())
        .is_some_and(|s| s.inputs == key)
}

fn write_stamp(dir: &Path, key: &str) -> Result<(), PipelineError> {
    let path = dir.join(STAMP_FILE);
    let body = serde_json::to_vec_pretty(&Stamp { inputs: key.to_string() }).expect("stamp serializes");
    fsutil::write_atomic(&path, &body).map_err(io_err(&path))
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("serializable")
}

fn corpus_format(path: &Path) -> CorpusFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
        _ => CorpusFormat::Jsonl,
    }
}

/// Load the corpus, scrub PII from every text and write stratified splits.
pub fn ingest(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let corpus = &cfg.paths.corpus;
    if !corpus.is_file() {
        return Err(PipelineError::MissingUpstreamArtifact(format!("corpus file {} not found", corpus.display())));
    }
    let out = &cfg.paths.splits_dir;
    let mut parts = vec![read(corpus)?, json_bytes(&cfg.split)];
    if let Ok(sidecar) = fs::read(manifest_path_for(corpus)) {
        parts.push(sidecar);
    }
    let key = fsutil::sha256_chunks(parts.iter().map(Vec::as_slice));
    if stamp_matches(out, &key) {
        return Ok(StageOutcome { stage: "ingest", up_to_date: true, summary: "splits up to date".into() });
    }

    let (records, manifest) = load_corpus(corpus, corpus_format(corpus))?;
    let scrubbed: Vec<ComplaintRecord> =
        records.into_iter().map(|r| ComplaintRecord { text: scrub_pii(&r.text), ..r }).collect();
    let splits = stratified_split(&scrubbed, cfg.split.ratios(), cfg.split.seed)?;
    let mut m = manifest.clone();
    let r = cfg.split.ratios();
    m.split = Some(SplitInfo { ratios: [r.train, r.val, r.test], seed: cfg.split.seed, stratify: Task::Type });
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, part) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        write_corpus(&out.join(format!("{name}.jsonl")), part, &m)?;
    }
    write_stamp(out, &key)?;
    Ok(StageOutcome {
        stage: "ingest",
        up_to_date: false,
        summary: format!(
            "{} records -> train {} / val {} / test {}",
            scrubbed.len(),
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        ),
    })
}

/// The three splits and their shared manifest.
pub fn load_splits(cfg: &PipelineConfig) -> Result<(BTreeMap<&'static str, Vec<ComplaintRecord>>, CorpusManifest), PipelineError> {
    let dir = &cfg.paths.splits_dir;
    let mut out = BTreeMap::new();
    let mut manifest = None;
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        if !path.is_file() {
            return Err(PipelineError::MissingUpstreamArtifact(format!(
                "split {} not found; run `medcascade ingest` first",
                path.display()
            )));
        }
        let (records, m) = load_corpus(&path, CorpusFormat::Jsonl)?;
        out.insert(name, records);
        manifest = Some(m);
    }
    Ok((out, manifest.expect("three splits")))
}

fn all_records(splits: &BTreeMap<&'static str, Vec<ComplaintRecord>>) -> Vec<ComplaintRecord> {
    let mut all: Vec<ComplaintRecord> = splits.values().flatten().cloned().collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    all
}

pub fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let cache_dir = &cfg.paths.cache_dir;
    let cache = ResponseCache::on_disk(cache_dir).map_err(io_err(cache_dir))?;
    let mut gw = Gateway::new(cache).register("mock", MockBackend::default()).with_retry(cfg.gateway.retry);
    if cfg.gateway.backend == BackendKind::Live {
        gw = gw.register("live", HttpBackend::new(cfg.gateway.http_settings()));
    }
    if let Some(rps) = cfg.gateway.requests_per_second {
        if !(rps > 0.0) {
            return Err(PipelineError::ConfigInvalid("`gateway.requests_per_second` must be positive".into()));
        }
        gw = gw.with_rate_limit(TokenBucket::new(rps, 1));
    }
    Ok(gw)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub processed: usize,
    pub skipped: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub fatal_records: usize,
}

/// Run refinement, summarization and entity extraction for every record.
pub fn preprocess(cfg: &PipelineConfig, resume: bool) -> Result<(StageOutcome, PreprocessSummary), PipelineError> {
    let (splits, _) = load_splits(cfg)?;
    let records = all_records(&splits);
    let gateway = build_gateway(cfg)?;
    let mut pcfg = cfg.preprocess.clone();
    pcfg.backend_id = cfg.gateway.backend_id().to_string();
    let store = BundleStore::new(&cfg.paths.bundle_store);
    let run = Preprocessor::new(&gateway, pcfg).run_bundle(&records, &store, resume)?;
    let fatal: std::collections::BTreeSet<&str> =
        run.ledger.iter().filter(|e| e.fatal).map(|e| e.record_id.as_str()).collect();
    let summary = PreprocessSummary {
        processed: run.processed,
        skipped: run.skipped,
        backend_calls: gateway.backend_calls(),
        cache_hits: gateway.cache_hits(),
        fatal_records: fatal.len(),
    };
    Ok((
        StageOutcome {
            stage: "preprocess",
            up_to_date: run.processed == 0,
            summary: format!(
                "{} processed, {} resumed, {} backend calls, {} cache hits, {} records failed",
                summary.processed, summary.skipped, summary.backend_calls, summary.cache_hits, summary.fatal_records
            ),
        },
        summary,
    ))
}

pub fn variant_path(cfg: &PipelineConfig, condition: Condition, split: &str) -> PathBuf {
    cfg.paths.variants_dir.join(condition.as_str()).join(format!("{split}.jsonl"))
}

/// Build the requested conditions for every split.
pub fn variants(cfg: &PipelineConfig, conditions: &[Condition]) -> Result<StageOutcome, PipelineError> {
    let (splits, _) = load_splits(cfg)?;
    let store = BundleStore::new(&cfg.paths.bundle_store);
    let augmented = conditions.iter().any(|c| *c != Condition::Normal);
    if augmented && !store.exists() {
        return Err(PipelineError::MissingUpstreamArtifact(format!(
            "no preprocessing bundles under {}; run `medcascade preprocess` first",
            store.root().display()
        )));
    }
    let all = all_records(&splits);
    let bundle_hash = if augmented { store.content_hash(all.iter().map(|r| r.id.as_str())) } else { String::new() };
    let mut written = Vec::new();
    for &cond in conditions {
        let dir = cfg.paths.variants_dir.join(cond.as_str());
        let split_bytes: Vec<Vec<u8>> = SPLITS
            .iter()
            .map(|s| read(&cfg.paths.splits_dir.join(format!("{s}.jsonl"))))
            .collect::<Result<_, _>>()?;
        let mut parts = split_bytes;
        parts.push(cond.as_str().as_bytes().to_vec());
        if cond != Condition::Normal {
            parts.push(bundle_hash.as_bytes().to_vec());
        }
        let key = fsutil::sha256_chunks(parts.iter().map(Vec::as_slice));
        if stamp_matches(&dir, &key) {
            continue;
        }
        for split in SPLITS {
            let v = build_variant(&splits[split], &store, cond)?;
            write_variant(&variant_path(cfg, cond, split), &v)?;
        }
        write_stamp(&dir, &key)?;
        written.push(cond.as_str());
    }
    Ok(StageOutcome {
        stage: "variants",
        up_to_date: written.is_empty(),
        summary: if written.is_empty() { "variants up to date".into() } else { format!("built {}", written.join(", ")) },
    })
}

fn load_variant(cfg: &PipelineConfig, condition: Condition, split: &str) -> Result<(DatasetVariant, Vec<u8>), PipelineError> {
    let path = variant_path(cfg, condition, split);
    if !path.is_file() {
        return Err(PipelineError::MissingUpstreamArtifact(format!(
            "variant {} not found; run `medcascade variants` first",
            path.display()
        )));
    }
    Ok((read_variant(&path)?, read(&path)?))
}

pub fn run_dir(cfg: &PipelineConfig, model: &str, condition: Condition, finetune: bool) -> PathBuf {
    cfg.paths
        .runs_dir
        .join(fsutil::safe_file_stem(model))
        .join(condition.as_str())
        .join(if finetune { "finetune" } else { "no_finetune" })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterSummary {
    pub lora: LoraConfig,
    pub trainable_params: usize,
}

/// Everything needed to reproduce one training cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub stamp: String,
    pub model: String,
    pub condition: Condition,
    pub fine_tuned: bool,
    pub seeds: BTreeMap<String, u64>,
    pub data_hashes: BTreeMap<String, String>,
    pub adapter: AdapterSummary,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub config: PipelineConfig,
}

/// Train one (model, condition) cell, or with `finetune = false` evaluate
/// the frozen encoder with untrained heads. Scores are for the test split.
pub fn train(cfg: &PipelineConfig, model_id: &str, condition: Condition, finetune: bool) -> Result<StageOutcome, PipelineError> {
    let mut cfg = cfg.clone();
    cfg.encoder.id = model_id.to_string();
    let mut data = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for split in SPLITS {
        let (v, bytes) = load_variant(&cfg, condition, split)?;
        hashes.insert(split.to_string(), fsutil::sha256_hex(&bytes));
        data.insert(split, v);
    }
    let encoder = resolve_encoder(model_id, &cfg.encoder.toy).map_err(|msg| {
        if msg.starts_with("unknown") {
            PipelineError::ConfigInvalid(msg)
        } else {
            PipelineError::EncoderUnavailable(msg)
        }
    })?;
    let manifest_path = cfg.paths.splits_dir.join("train.manifest.json");
    let corpus_manifest = read_manifest(&manifest_path).map_err(|_| {
        PipelineError::MissingUpstreamArtifact(format!("{} not found; run `medcascade ingest` first", manifest_path.display()))
    })?;
    let mut labels = BTreeMap::new();
    for &task in &cfg.tasks {
        let vocab = corpus_manifest.vocab.for_task(task);
        if vocab.is_empty() {
            return Err(PipelineError::ConfigInvalid(format!("task `{task}` has no vocabulary in the corpus manifest")));
        }
        labels.insert(task, vocab.to_vec());
    }

    let dir = run_dir(&cfg, model_id, condition, finetune);
    let mut stamp_parts = vec![
        json_bytes(&(&cfg.seed, &cfg.tasks, &cfg.encoder, &cfg.lora, &cfg.train)),
        vec![u8::from(finetune)],
    ];
    stamp_parts.extend(hashes.values().map(|h| h.as_bytes().to_vec()));
    let key = fsutil::sha256_chunks(stamp_parts.iter().map(Vec::as_slice));
    if stamp_matches(&dir, &key) {
        return Ok(StageOutcome { stage: "train", up_to_date: true, summary: format!("{} up to date", dir.display()) });
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let mut model = MultiTaskModel::new(encoder, labels, &cfg.tasks, &cfg.lora, cfg.encoder.pooling, cfg.seed)
        .map_err(TrainError::from)?;
    let trainable = model.trainable_params();
    let (mut best_epoch, mut steps) = (None, 0);
    if finetune {
        let out = trainer::train(&mut model, &data["train"].examples, &data["val"].examples, &cfg.train)?;
        let log_path = dir.join("train_log.csv");
        fsutil::write_atomic(&log_path, out.log.to_csv().as_bytes()).map_err(io_err(&log_path))?;
        out.best.save(&dir.join("checkpoint_best.json"))?;
        out.last.save(&dir.join("checkpoint_last.json"))?;
        model.load_checkpoint(&out.best)?;
        best_epoch = Some(out.best_epoch);
        steps = out.steps;
    } else {
        model.checkpoint().save(&dir.join("checkpoint_init.json"))?;
    }

    let eval = evaluate(&model, &data["test"], &cfg.tasks)?;
    let pred_path = dir.join("predictions.jsonl");
    fsutil::write_atomic(&pred_path, &predictions_jsonl(&eval.predictions)).map_err(io_err(&pred_path))?;
    let cell = CellResult { model: model_id.to_string(), condition, fine_tuned: finetune, scores: eval.scores };
    let scores_path = dir.join("scores.json");
    fsutil::write_atomic(&scores_path, &serde_json::to_vec_pretty(&cell).expect("scores serialize"))
        .map_err(io_err(&scores_path))?;

    let manifest = RunManifest {
        stamp: key.clone(),
        model: model_id.to_string(),
        condition,
        fine_tuned: finetune,
        seeds: BTreeMap::from([
            ("init".to_string(), cfg.seed),
            ("shuffle".to_string(), cfg.train.seed),
            ("split".to_string(), cfg.split.seed),
        ]),
        data_hashes: hashes,
        adapter: AdapterSummary { lora: cfg.lora.clone(), trainable_params: trainable },
        best_epoch,
        steps,
        config: cfg.clone(),
    };
    let mpath = dir.join("manifest.json");
    fsutil::write_atomic(&mpath, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
        .map_err(io_err(&mpath))?;
    write_stamp(&dir, &key)?;

    let summary = cell
        .scores
        .iter()
        .map(|(t, s)| format!("{t} acc {:.3} bal {:.3}", s.accuracy, s.balanced_accuracy))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(StageOutcome { stage: "train", up_to_date: false, summary: format!("{}: {summary}", dir.display()) })
}

fn find_scores(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_scores(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "scores.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Collect every run's scores into `report.json` and `report.md`.
pub fn report(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let runs = &cfg.paths.runs_dir;
    let mut paths = Vec::new();
    if runs.is_dir() {
        find_scores(runs, &mut paths).map_err(io_err(runs))?;
    }
    if paths.is_empty() {
        return Err(PipelineError::MissingUpstreamArtifact(format!(
            "no run results under {}; run `medcascade train` first",
            runs.display()
        )));
    }
    let cells = paths
        .iter()
        .map(|p| {
            serde_json::from_slice::<CellResult>(&read(p)?)
                .map_err(|e| PipelineError::Io { path: p.clone(), source: io::Error::new(io::ErrorKind::InvalidData, e) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let r = render_report(&cells, &cfg.paths.report_dir)?;
    Ok(StageOutcome {
        stage: "report",
        up_to_date: false,
        summary: format!("{} cells in {} rows -> {}", r.cells.len(), r.rows.len(), cfg.paths.report_dir.display()),
    })
}

/// Load a saved checkpoint into a freshly built model for `cfg`.
pub fn load_model(cfg: &PipelineConfig, checkpoint: &Path) -> Result<MultiTaskModel<trainer::TinyEncoder>, PipelineError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let encoder = resolve_encoder(&ckpt.encoder_id, &cfg.encoder.toy).map_err(PipelineError::EncoderUnavailable)?;
    let mut model = MultiTaskModel::new(encoder, ckpt.labels.clone(), &ckpt.tasks, &cfg.lora, ckpt.pooling, cfg.seed)
        .map_err(TrainError::from)?;
    model.load_checkpoint(&ckpt)?;
    Ok(model)
}
