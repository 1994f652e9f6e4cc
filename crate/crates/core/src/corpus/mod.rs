//! Complaint records, label vocabularies, corpus I/O, PII scrubbing and
//! stratified splitting.

mod pii;
mod split;

pub use pii::{scrub_pii, PLACEHOLDERS};
pub use split::{stratified_split, stratified_split_by, SplitError, SplitRatios, Splits};

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::fsutil;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_AGE: u32 = 130;

/// A classification task over a complaint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Diagnosis,
    Type,
    Severity,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Diagnosis, Task::Type, Task::Severity];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Diagnosis => "diagnosis",
            Task::Type => "type",
            Task::Severity => "severity",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" => Ok(Task::Diagnosis),
            "type" => Ok(Task::Type),
            "severity" => Ok(Task::Severity),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Unspecified,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    pub diagnosis: Option<String>,
    #[serde(rename = "type")]
    pub condition_type: String,
    pub severity: String,
}

impl LabelSet {
    pub fn get(&self, task: Task) -> Option<&str> {
        match task {
            Task::Diagnosis => self.diagnosis.as_deref(),
            Task::Type => Some(&self.condition_type),
            Task::Severity => Some(&self.severity),
        }
    }
}

/// One patient post.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplaintRecord {
    pub id: String,
    pub text: String,
    pub age: Option<u32>,
    pub gender: Option<Gender>,
    pub labels: LabelSet,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    #[serde(rename = "type")]
    pub condition_type: Vec<String>,
    pub severity: Vec<String>,
    #[serde(default)]
    pub diagnosis: Vec<String>,
}

impl Vocabularies {
    /// Ordered vocabulary for `task`. An empty diagnosis vocabulary means the
    /// task is not declared for this corpus.
    pub fn for_task(&self, task: Task) -> &[String] {
        match task {
            Task::Diagnosis => &self.diagnosis,
            Task::Type => &self.condition_type,
            Task::Severity => &self.severity,
        }
    }

    pub fn index_of(&self, task: Task, label: &str) -> Option<usize> {
        self.for_task(task).iter().position(|l| l == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratify: Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub vocab: Vocabularies,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitInfo>,
}

impl CorpusManifest {
    pub fn new(vocab: Vocabularies) -> Self {
        Self { schema_version: SCHEMA_VERSION, vocab, record_count: None, split: None }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CorpusError::ManifestInvalid(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        for task in Task::ALL {
            let v = self.vocab.for_task(task);
            if task == Task::Diagnosis && v.is_empty() {
                continue;
            }
            if v.len() < 2 {
                return Err(CorpusError::ManifestInvalid(format!(
                    "vocabulary `{task}` needs at least 2 labels"
                )));
            }
            let mut seen = HashSet::new();
            for l in v {
                if !seen.insert(l.as_str()) {
                    return Err(CorpusError::ManifestInvalid(format!(
                        "vocabulary `{task}` repeats `{l}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: field `{field}`: {reason}")]
    MalformedRecord { line: usize, field: String, reason: String },
    #[error("record `{id}` has label `{label}` outside the `{task}` vocabulary")]
    UnknownLabel { id: String, task: Task, label: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("manifest not found (expected header line or {0})")]
    ManifestMissing(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// Sidecar manifest path: `corpus.jsonl` -> `corpus.manifest.json`.
pub fn manifest_path_for(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Load a corpus and its manifest. JSONL files may carry the manifest as
/// their first line; otherwise the sidecar next to the file is read.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
) -> Result<(Vec<ComplaintRecord>, CorpusManifest), CorpusError> {
    let content = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let (embedded, raw) = match format {
        CorpusFormat::Jsonl => parse_jsonl(&content)?,
        CorpusFormat::Csv => (None, parse_csv(&content)?),
    };
    let mut manifest = match embedded {
        Some(m) => m,
        None => read_manifest(&manifest_path_for(path))?,
    };
    manifest.validate()?;
    if let Some(expected) = manifest.record_count {
        if expected != raw.len() {
            return Err(CorpusError::ManifestInvalid(format!(
                "record_count {expected} but file holds {}",
                raw.len()
            )));
        }
    }
    let mut seen = HashSet::new();
    for (_, rec) in &raw {
        check_labels(rec, &manifest)?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId(rec.id.clone()));
        }
    }
    manifest.record_count = Some(raw.len());
    Ok((raw.into_iter().map(|(_, r)| r).collect(), manifest))
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CorpusError::ManifestMissing(path.to_path_buf()))
        }
        Err(e) => return Err(CorpusError::io(path, e)),
    };
    serde_json::from_slice(&bytes).map_err(|e| CorpusError::ManifestInvalid(e.to_string()))
}

/// Write records as JSONL with a sidecar manifest. Both files are replaced
/// atomically.
pub fn write_corpus(
    path: &Path,
    records: &[ComplaintRecord],
    manifest: &CorpusManifest,
) -> Result<(), CorpusError> {
    let mut manifest = manifest.clone();
    manifest.record_count = Some(records.len());
    let mut manifest_json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest_json.push(b'\n');
    let mpath = manifest_path_for(path);
    fsutil::write_atomic(&mpath, &manifest_json).map_err(|e| CorpusError::io(&mpath, e))?;
    fsutil::write_atomic(path, &records_to_jsonl(records)).map_err(|e| CorpusError::io(path, e))
}

pub fn records_to_jsonl(records: &[ComplaintRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Stable content hash of a record list.
pub fn corpus_hash(records: &[ComplaintRecord]) -> String {
    fsutil::sha256_hex(&records_to_jsonl(records))
}

fn check_labels(rec: &ComplaintRecord, manifest: &CorpusManifest) -> Result<(), CorpusError> {
    for task in Task::ALL {
        let vocab = manifest.vocab.for_task(task);
        if task == Task::Diagnosis && vocab.is_empty() {
            continue;
        }
        if let Some(label) = rec.labels.get(task) {
            if !vocab.iter().any(|v| v == label) {
                return Err(CorpusError::UnknownLabel {
                    id: rec.id.clone(),
                    task,
                    label: label.to_string(),
                });
            }
        }
    }
    Ok(())
}

type Numbered = Vec<(usize, ComplaintRecord)>;

fn parse_jsonl(content: &str) -> Result<(Option<CorpusManifest>, Numbered), CorpusError> {
    let mut manifest = None;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
            line: lineno,
            field: "<json>".into(),
            reason: e.to_string(),
        })?;
        if out.is_empty() && manifest.is_none() && value.get("schema_version").is_some() {
            manifest = Some(
                serde_json::from_value(value)
                    .map_err(|e| CorpusError::ManifestInvalid(e.to_string()))?,
            );
            continue;
        }
        out.push((lineno, record_from_value(&value, lineno)?));
    }
    Ok((manifest, out))
}

fn malformed(line: usize, field: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRecord { line, field: field.into(), reason: reason.into() }
}

fn record_from_value(v: &Value, line: usize) -> Result<ComplaintRecord, CorpusError> {
    let obj = v.as_object().ok_or_else(|| malformed(line, "<record>", "not an object"))?;
    let str_field = |o: &serde_json::Map<String, Value>, name: &str| -> Result<String, CorpusError> {
        match o.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(malformed(line, name, "expected string")),
            None => Err(malformed(line, name, "missing")),
        }
    };
    let opt_str = |o: &serde_json::Map<String, Value>, name: &str| -> Result<Option<String>, CorpusError> {
        match o.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(malformed(line, name, "expected string or null")),
        }
    };

    let id = str_field(obj, "id")?;
    let text = str_field(obj, "text")?;
    let age = match obj.get("age") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => Some(
            n.as_u64()
                .and_then(|a| u32::try_from(a).ok())
                .ok_or_else(|| malformed(line, "age", "expected non-negative integer"))?,
        ),
        Some(_) => return Err(malformed(line, "age", "expected integer or null")),
    };
    let gender = opt_str(obj, "gender")?.map(|g| parse_gender(&g, line)).transpose()?;
    let labels = obj
        .get("labels")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed(line, "labels", "missing or not an object"))?;
    let labels = LabelSet {
        diagnosis: opt_str(labels, "diagnosis")?,
        condition_type: str_field(labels, "type")?,
        severity: str_field(labels, "severity")?,
    };
    build_record(id, text, age, gender, labels, line)
}

fn parse_gender(g: &str, line: usize) -> Result<Gender, CorpusError> {
    match g {
        "male" => Ok(Gender::Male),
        "female" => Ok(Gender::Female),
        "unspecified" => Ok(Gender::Unspecified),
        other => Err(malformed(line, "gender", format!("unknown gender `{other}`"))),
    }
}

fn build_record(
    id: String,
    text: String,
    age: Option<u32>,
    gender: Option<Gender>,
    labels: LabelSet,
    line: usize,
) -> Result<ComplaintRecord, CorpusError> {
    if id.trim().is_empty() {
        return Err(malformed(line, "id", "empty"));
    }
    let text: String = text.nfc().collect();
    if text.trim().is_empty() {
        return Err(malformed(line, "text", "empty after trimming"));
    }
    if let Some(a) = age {
        if a > MAX_AGE {
            return Err(malformed(line, "age", format!("{a} outside [0, {MAX_AGE}]")));
        }
    }
    Ok(ComplaintRecord { id, text, age, gender, labels })
}

#[derive(Deserialize)]
struct CsvRow {
    id: String,
    text: String,
    #[serde(default)]
    age: String,
    #[serde(default)]
    gender: String,
    #[serde(default)]
    diagnosis: String,
    #[serde(rename = "type")]
    condition_type: String,
    severity: String,
}

fn parse_csv(content: &str) -> Result<Numbered, CorpusError> {
    let mut reader = csv::Reader::from_reader(content.as_bytes());
    let headers = reader.headers().map_err(|e| malformed(1, "<header>", e.to_string()))?.clone();
    let mut out = Vec::new();
    let mut raw = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut raw) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                return Err(malformed(line, "<row>", e.to_string()));
            }
        }
        let line = raw.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: CsvRow = raw.deserialize(Some(&headers)).map_err(|e| {
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|f| headers.get(f as usize))
                    .unwrap_or("<row>")
                    .to_string(),
                _ => "<row>".into(),
            };
            malformed(line, &field, e.to_string())
        })?;
        let blank = |s: &str| if s.trim().is_empty() { None } else { Some(s.to_string()) };
        let age = blank(&row.age)
            .map(|a| a.trim().parse::<u32>().map_err(|_| malformed(line, "age", "not an integer")))
            .transpose()?;
        let gender = blank(&row.gender).map(|g| parse_gender(g.trim(), line)).transpose()?;
        let labels = LabelSet {
            diagnosis: blank(&row.diagnosis),
            condition_type: row.condition_type,
            severity: row.severity,
        };
        out.push((line, build_record(row.id, row.text, age, gender, labels, line)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CorpusManifest {
        CorpusManifest::new(Vocabularies {
            condition_type: vec!["chronic".into(), "acute".into()],
            severity: vec!["mild".into(), "severe".into()],
            diagnosis: vec![],
        })
    }

    fn line(id: &str, sev: &str) -> String {
        format!(
            r#"{{"id":"{id}","text":"صداع شديد","age":40,"gender":"female","labels":{{"diagnosis":null,"type":"acute","severity":"{sev}"}}}}"#
        )
    }

    fn write_fixture(dir: &Path, lines: &[String]) -> PathBuf {
        let p = dir.join("c.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        fs::write(manifest_path_for(&p), serde_json::to_vec(&manifest()).unwrap()).unwrap();
        p
    }

    #[test]
    fn loads_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[line("a", "mild"), line("b", "severe"), line("c", "mild")]);
        let (recs, m) = load_corpus(&p, CorpusFormat::Jsonl).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(m.record_count, Some(3));
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn unknown_label_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[line("a", "mild"), line("x9", "extreme")]);
        match load_corpus(&p, CorpusFormat::Jsonl) {
            Err(CorpusError::UnknownLabel { id, label, task }) => {
                assert_eq!((id.as_str(), label.as_str(), task), ("x9", "extreme", Task::Severity));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[line("p1", "mild"), line("p1", "severe")]);
        assert!(matches!(load_corpus(&p, CorpusFormat::Jsonl), Err(CorpusError::DuplicateId(id)) if id == "p1"));
    }

    #[test]
    fn malformed_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"id":"b","text":"   ","labels":{"type":"acute","severity":"mild"}}"#.to_string();
        let p = write_fixture(dir.path(), &[line("a", "mild"), bad]);
        match load_corpus(&p, CorpusFormat::Jsonl) {
            Err(CorpusError::MalformedRecord { line, field, .. }) => assert_eq!((line, field.as_str()), (2, "text")),
            other => panic!("unexpected {other:?}"),
        }
        let old = r#"{"id":"b","text":"x","age":131,"labels":{"type":"acute","severity":"mild"}}"#.to_string();
        let p = write_fixture(dir.path(), &[old]);
        assert!(matches!(load_corpus(&p, CorpusFormat::Jsonl), Err(CorpusError::MalformedRecord { field, .. }) if field == "age"));
    }

    #[test]
    fn embedded_manifest_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        let header = serde_json::to_string(&manifest()).unwrap();
        fs::write(&p, format!("{header}\n{}\n", line("a", "mild"))).unwrap();
        let (recs, m) = load_corpus(&p, CorpusFormat::Jsonl).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(m.vocab, manifest().vocab);
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest();
        m.vocab.severity = vec!["mild".into()];
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.vocab.condition_type = vec!["a".into(), "a".into()];
        assert!(m.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.jsonl");
        fs::write(&p, line("a", "mild")).unwrap();
        assert!(matches!(load_corpus(&p, CorpusFormat::Jsonl), Err(CorpusError::ManifestMissing(_))));
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(
            &p,
            "id,text,age,gender,diagnosis,type,severity\np1,\"ألم، في البطن\",30,male,,acute,mild\np2,cough,,,,chronic,severe\n",
        )
        .unwrap();
        fs::write(manifest_path_for(&p), serde_json::to_vec(&manifest()).unwrap()).unwrap();
        let (recs, _) = load_corpus(&p, CorpusFormat::Csv).unwrap();
        assert_eq!(recs[0].text, "ألم، في البطن");
        assert_eq!(recs[0].age, Some(30));
        assert_eq!(recs[1].gender, None);
        assert_eq!(recs[1].labels.diagnosis, None);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), &[line("a", "mild"), line("b", "severe")]);
        let (recs, m) = load_corpus(&p, CorpusFormat::Jsonl).unwrap();
        let out = dir.path().join("out.jsonl");
        write_corpus(&out, &recs, &m).unwrap();
        let (again, m2) = load_corpus(&out, CorpusFormat::Jsonl).unwrap();
        assert_eq!(recs, again);
        assert_eq!(m, m2);
    }
}
