use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Entity, PreprocessError, Preprocessor};
use crate::corpus::ComplaintRecord;
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessBundle {
    pub record_id: String,
    pub refined: String,
    pub summarized: String,
    pub entities: Vec<Entity>,
    pub prompt_hashes: BTreeMap<String, String>,
    /// Set when a fatal stage failed; such bundles are redone on resume.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub record_id: String,
    pub stage: String,
    pub error: String,
    pub fatal: bool,
}

/// Per-record bundle files under `<root>/bundles/` plus the failure ledger
/// `<root>/ledger.jsonl`.
#[derive(Clone, Debug)]
pub struct BundleStore {
    root: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct BundleRun {
    /// One bundle per input record, in input order.
    pub bundles: Vec<PreprocessBundle>,
    pub ledger: Vec<LedgerEntry>,
    pub skipped: usize,
    pub processed: usize,
}

impl BundleStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.root.join("bundles")
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }

    pub fn exists(&self) -> bool {
        self.bundle_dir().is_dir()
    }

    fn bundle_path(&self, record_id: &str) -> PathBuf {
        self.bundle_dir().join(format!("{}.json", fsutil::safe_file_stem(record_id)))
    }

    pub fn load(&self, record_id: &str) -> Option<PreprocessBundle> {
        let bytes = fs::read(self.bundle_path(record_id)).ok()?;
        serde_json::from_slice::<PreprocessBundle>(&bytes).ok().filter(|b| b.record_id == record_id)
    }

    pub fn save(&self, bundle: &PreprocessBundle) -> std::io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(bundle).expect("bundle serializes");
        bytes.push(b'\n');
        fsutil::write_atomic(&self.bundle_path(&bundle.record_id), &bytes)
    }

    pub fn read_ledger(&self) -> Vec<LedgerEntry> {
        fs::read_to_string(self.ledger_path())
            .map(|s| s.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
            .unwrap_or_default()
    }

    fn write_ledger(&self, entries: &[LedgerEntry]) -> std::io::Result<()> {
        let mut out = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut out, e).expect("ledger entry serializes");
            out.push(b'\n');
        }
        fsutil::write_atomic(&self.ledger_path(), &out)
    }

    /// Hash over the bundles of `ids`, in the given order; missing bundles
    /// hash as empty.
    pub fn content_hash<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> String {
        let blobs: Vec<Vec<u8>> = ids
            .into_iter()
            .map(|id| self.load(id).map(|b| serde_json::to_vec(&b).unwrap()).unwrap_or_default())
            .collect();
        fsutil::sha256_chunks(blobs.iter().map(Vec::as_slice))
    }
}

impl Preprocessor<'_> {
    /// Run all three layers for every record and persist one bundle file each.
    /// Stage failures go to the ledger: refinement and summarization failures
    /// are fatal for the record (a degraded bundle is still written), an entity
    /// failure only empties the entity list.
    pub fn run_bundle(
        &self,
        records: &[ComplaintRecord],
        store: &BundleStore,
        resume: bool,
    ) -> Result<BundleRun, PreprocessError> {
        fs::create_dir_all(store.bundle_dir()).map_err(PreprocessError::Store)?;
        let mut run = BundleRun::default();
        let mut ledger: Vec<LedgerEntry> = Vec::new();
        let prior = store.read_ledger();

        for rec in records {
            if resume {
                if let Some(b) = store.load(&rec.id).filter(|b| !b.degraded) {
                    ledger.extend(prior.iter().filter(|e| e.record_id == rec.id).cloned());
                    run.bundles.push(b);
                    run.skipped += 1;
                    continue;
                }
            }
            let mut failures = Vec::new();
            let mut fail = |stage: &str, err: PreprocessError, fatal: bool| {
                log::warn!("record `{}` stage {stage} failed: {err}", rec.id);
                failures.push(LedgerEntry { record_id: rec.id.clone(), stage: stage.into(), error: err.to_string(), fatal });
            };
            let refined = self.refine(rec).unwrap_or_else(|e| {
                fail("refine", e, true);
                String::new()
            });
            let summarized = self.summarize(rec).unwrap_or_else(|e| {
                fail("summarize", e, true);
                String::new()
            });
            let entities = self.extract_entities(rec).unwrap_or_else(|e| {
                fail("ner", e, false);
                Vec::new()
            });
            let degraded = failures.iter().any(|f| f.fatal);
            let bundle = PreprocessBundle {
                record_id: rec.id.clone(),
                refined,
                summarized,
                entities,
                prompt_hashes: self.prompt_hashes(),
                degraded,
            };
            store.save(&bundle).map_err(PreprocessError::Store)?;
            if !failures.is_empty() {
                ledger.extend(failures);
                store.write_ledger(&ledger).map_err(PreprocessError::Ledger)?;
            }
            run.bundles.push(bundle);
            run.processed += 1;
        }
        store.write_ledger(&ledger).map_err(PreprocessError::Ledger)?;
        run.ledger = ledger;
        Ok(run)
    }

    pub fn prompt_hashes(&self) -> BTreeMap<String, String> {
        let t = self.templates();
        [&t.refine, &t.summarize, &t.ner].into_iter().map(|p| (p.name.clone(), p.hash.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Backend, CompletionRequest, Gateway, GatewayError, MockBackend, ResponseCache};
    use crate::preprocess::tests::record;
    use crate::preprocess::PreprocessConfig;

    fn records(n: usize) -> Vec<ComplaintRecord> {
        (1..=n).map(|i| record(&format!("r{i}"), &format!("patient {i} has fever. Then cough. Then rest."))).collect()
    }

    #[test]
    fn five_records_empty_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let store = BundleStore::new(dir.path());
        let gw = Gateway::with_mock();
        let run = Preprocessor::new(&gw, PreprocessConfig::default()).run_bundle(&records(5), &store, false).unwrap();
        assert_eq!(run.bundles.len(), 5);
        assert!(run.ledger.is_empty());
        assert_eq!(run.bundles[0].summarized, "patient 1 has fever. Then cough.");
        assert_eq!(run.bundles[0].entities.len(), 2);
        assert_eq!(run.bundles[0].prompt_hashes.len(), 3);
        assert_eq!(store.load("r3").unwrap(), run.bundles[2]);
        assert!(store.read_ledger().is_empty());
    }

    #[test]
    fn resume_skips_finished_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = BundleStore::new(dir.path());
        let recs = records(5);
        let gw = Gateway::with_mock();
        Preprocessor::new(&gw, PreprocessConfig::default()).run_bundle(&recs[..3], &store, false).unwrap();
        let calls_before = gw.backend_calls();

        let run = Preprocessor::new(&gw, PreprocessConfig::default()).run_bundle(&recs, &store, true).unwrap();
        assert_eq!((run.skipped, run.processed), (3, 2));
        assert_eq!(gw.backend_calls() - calls_before, 2 * 3);
        assert_eq!(run.bundles.iter().map(|b| b.record_id.as_str()).collect::<Vec<_>>(), ["r1", "r2", "r3", "r4", "r5"]);
    }

    struct NerAlwaysProse;
    impl Backend for NerAlwaysProse {
        fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
            if req.prompt.starts_with("NER:") {
                Ok("I found a few things. Hard to say.".into())
            } else if req.prompt.contains("boom") && req.prompt.starts_with("REFINE:") {
                Err(GatewayError::Rejected { status: 400, body: "bad".into() })
            } else {
                MockBackend::default().complete(req)
            }
        }
    }

    #[test]
    fn failures_degrade_without_losing_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = BundleStore::new(dir.path());
        let gw = Gateway::new(ResponseCache::in_memory()).register("x", NerAlwaysProse);
        let cfg = PreprocessConfig { backend_id: "x".into(), ..Default::default() };
        let recs = vec![record("ok", "fever. cough."), record("bad", "boom fever")];
        let run = Preprocessor::new(&gw, cfg.clone()).run_bundle(&recs, &store, false).unwrap();
        assert_eq!(run.bundles.len(), 2);
        assert!(run.bundles[0].entities.is_empty());
        assert!(!run.bundles[0].degraded);
        assert!(run.bundles[1].degraded);
        assert_eq!(run.bundles[1].refined, "");
        let fatal: Vec<_> = run.ledger.iter().filter(|e| e.fatal).collect();
        assert_eq!(fatal.len(), 1);
        assert_eq!((fatal[0].record_id.as_str(), fatal[0].stage.as_str()), ("bad", "refine"));
        assert_eq!(run.ledger.iter().filter(|e| e.stage == "ner").count(), 2);
        let healthy = run.bundles.iter().filter(|b| !b.degraded).count();
        let fatal_records: std::collections::HashSet<_> = fatal.iter().map(|e| &e.record_id).collect();
        assert_eq!(healthy + fatal_records.len(), recs.len());
        assert_eq!(store.read_ledger(), run.ledger);

        // degraded bundles are redone on resume
        let again = Preprocessor::new(&gw, cfg).run_bundle(&recs, &store, true).unwrap();
        assert_eq!((again.skipped, again.processed), (1, 1));
    }

    #[test]
    fn mock_runs_are_byte_identical() {
        let recs = records(4);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let store = BundleStore::new(dir.path());
            let gw = Gateway::with_mock();
            Preprocessor::new(&gw, PreprocessConfig::default()).run_bundle(&recs, &store, false).unwrap();
            let files: Vec<Vec<u8>> =
                recs.iter().map(|r| fs::read(store.bundle_path(&r.id)).unwrap()).collect();
            outputs.push((files, store.content_hash(recs.iter().map(|r| r.id.as_str()))));
        }
        assert_eq!(outputs[0], outputs[1]);
    }
}
