//! Pipeline configuration: one TOML file, then environment overrides, then
//! command-line overrides.
//!
//! Overrides address fields by dotted path (`train.epochs`). Environment
//! variables use the `MEDCASCADE__` prefix with `__` between path segments,
//! e.g. `MEDCASCADE__TRAIN__EPOCHS=3`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::LoraConfig;
use crate::corpus::{SplitRatios, Task};
use crate::gateway::{HttpFlavor, HttpSettings, RetryPolicy};
use crate::preprocess::PreprocessConfig;
use crate::trainer::{AdamWConfig, Pooling, TinyEncoderConfig, TrainConfig};

pub const ENV_PREFIX: &str = "MEDCASCADE__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub splits_dir: PathBuf,
    pub bundle_store: PathBuf,
    pub cache_dir: PathBuf,
    pub variants_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let w = PathBuf::from("work");
        Self {
            corpus: PathBuf::from("complaints.jsonl"),
            splits_dir: w.join("splits"),
            bundle_store: w.join("preprocess"),
            cache_dir: w.join("llm-cache"),
            variants_dir: w.join("variants"),
            runs_dir: w.join("runs"),
            report_dir: w.join("report"),
        }
    }
}

impl Paths {
    /// All derived directories under `work`.
    pub fn under(work: &Path, corpus: &Path) -> Self {
        Self {
            corpus: corpus.to_path_buf(),
            splits_dir: work.join("splits"),
            bundle_store: work.join("preprocess"),
            cache_dir: work.join("llm-cache"),
            variants_dir: work.join("variants"),
            runs_dir: work.join("runs"),
            report_dir: work.join("report"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub flavor: HttpFlavor,
    pub url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub requests_per_second: Option<f64>,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            flavor: HttpFlavor::Llama3,
            url: "http://localhost:11434".into(),
            model: "llama3".into(),
            timeout_secs: 120,
            requests_per_second: None,
            retry: RetryPolicy::default(),
        }
    }
}

impl GatewayConfig {
    /// Backend id the preprocessing stage requests. The key itself is read
    /// from the environment and never stored in the config.
    pub fn backend_id(&self) -> &'static str {
        match self.backend {
            BackendKind::Mock => "mock",
            BackendKind::Live => "live",
        }
    }

    pub fn http_settings(&self) -> HttpSettings {
        HttpSettings {
            flavor: self.flavor,
            url: self.url.clone(),
            model: self.model.clone(),
            api_key: None,
            timeout_secs: self.timeout_secs,
        }
        .with_env()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self { train: r.train, val: r.val, test: r.test, seed: 7 }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios { train: self.train, val: self.val, test: self.test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `toy`, or one of the pretrained Arabic encoder ids.
    pub id: String,
    pub pooling: Pooling,
    pub toy: TinyEncoderConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { id: "toy".into(), pooling: Pooling::Cls, toy: TinyEncoderConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for adapter and head initialization.
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub paths: Paths,
    pub split: SplitConfig,
    pub gateway: GatewayConfig,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            tasks: vec![Task::Type, Task::Severity],
            paths: Paths::default(),
            split: SplitConfig::default(),
            gateway: GatewayConfig::default(),
            preprocess: PreprocessConfig::default(),
            encoder: EncoderConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings sized for the toy encoder: the pretrained-scale learning
    /// rate barely moves a randomly initialized encoder in 25 epochs.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.train.optimizer = AdamWConfig { learning_rate: 5e-3, ..AdamWConfig::default() };
        c
    }

    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(src).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.tasks.is_empty() {
            return bad("`tasks` is empty".into());
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return bad("`train.batch_size` and `train.epochs` must be positive".into());
        }
        if !(self.train.optimizer.learning_rate > 0.0) {
            return bad("`train.optimizer.learning_rate` must be positive".into());
        }
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) || !(0.0..1.0).contains(&self.lora.dropout_rate) {
            return bad("`lora` needs rank ≥ 1, alpha > 0 and dropout_rate in [0, 1)".into());
        }
        if let Err(e) = self.split.ratios().validate() {
            return bad(format!("`split`: {e}"));
        }
        let t = &self.encoder.toy;
        if t.d_model == 0 || t.max_seq_len < 2 || t.vocab_size < 8 {
            return bad("`encoder.toy` needs d_model ≥ 1, max_seq_len ≥ 2, vocab_size ≥ 8".into());
        }
        Ok(())
    }

    /// Set one field by dotted path. `raw` is parsed as a TOML value and
    /// falls back to a plain string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let value = parse_value(raw);
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().filter(|(l, _)| !l.is_empty()).ok_or_else(|| {
            ConfigError::Invalid(format!("empty override key `{key}`"))
        })?;
        let mut table = &mut root;
        for p in parents {
            table = match table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
                toml::Value::Table(t) => t,
                _ => return Err(ConfigError::Invalid(format!("`{key}`: `{p}` is not a section"))),
            };
        }
        table.insert(last.to_string(), value);
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("override `{key}={raw}`: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Apply every `MEDCASCADE__A__B=value` pair from `vars`, sorted by name.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), ConfigError> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase().replace("__", "."), v)))
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// File (or defaults), then environment, then `overrides` in order.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::toy(),
        };
        c.apply_env(env)?;
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Invalid(format!("override `{s}` is not key=value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.epochs, 25);
        assert_eq!(c.lora.rank, 16);
        assert_eq!(c.lora.alpha, 8.0);
        assert_eq!(c.lora.dropout_rate, 0.05);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = PipelineConfig::from_toml("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn unknown_and_invalid_fields_are_rejected() {
        assert!(PipelineConfig::from_toml("[train]\nepoch = 2\n").is_err());
        assert!(PipelineConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(PipelineConfig::from_toml("tasks = []\n").is_err());
        assert!(PipelineConfig::from_toml("tasks = [\"colour\"]\n").is_err());
    }

    #[test]
    fn precedence_is_flags_then_env_then_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[train]\nepochs = 5\nbatch_size = 2\n").unwrap();
        let env = vec![
            ("MEDCASCADE__TRAIN__EPOCHS".to_string(), "7".to_string()),
            ("MEDCASCADE__SEED".to_string(), "9".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let flags = vec![("seed".to_string(), "11".to_string())];
        let c = PipelineConfig::resolve(Some(&path), env, &flags).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.batch_size, 2);
    }

    #[test]
    fn overrides_parse_types() {
        let mut c = PipelineConfig::default();
        c.set("gateway.backend", "live").unwrap();
        assert_eq!(c.gateway.backend, BackendKind::Live);
        c.set("train.optimizer.learning_rate", "0.01").unwrap();
        assert_eq!(c.train.optimizer.learning_rate, 0.01);
        c.set("paths.corpus", "/tmp/x.jsonl").unwrap();
        assert_eq!(c.paths.corpus, PathBuf::from("/tmp/x.jsonl"));
        assert!(c.set("train.epochs", "many").is_err());
        assert!(c.set("nope.field", "1").is_err());
        assert_eq!(c.train.epochs, 25);
        assert_eq!(parse_override("a.b = 3").unwrap(), ("a.b".into(), "3".into()));
        assert!(parse_override("ab").is_err());
    }
}
