//! The three LLM preprocessing layers (refinement, summarization, entity
//! extraction) and the bundle runner that applies them to a corpus.

mod ner;
mod store;
mod template;

pub use ner::{parse_entities, Entity};
pub use store::{BundleRun, BundleStore, LedgerEntry, PreprocessBundle};
pub use template::{PromptTemplate, Templates};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{scrub_pii, ComplaintRecord};
use crate::gateway::mock::sentence_spans;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::lexicon::Lexicon;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("record `{0}` has no text left after PII scrubbing")]
    EmptyText(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("model refused to process record `{record_id}`: matched `{phrase}`")]
    RefusalDetected { record_id: String, phrase: String },
    #[error("model returned no {stage} text for record `{0}`", stage = .1)]
    EmptyOutput(String, &'static str),
    #[error("entity output for record `{record_id}` unparseable after reprompt: {reason}")]
    ParseFailure { record_id: String, reason: String },
    #[error("failure ledger write failed: {0}")]
    Ledger(std::io::Error),
    #[error("bundle store i/o: {0}")]
    Store(std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub backend_id: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    /// Case-insensitive phrases that mark a refusal.
    pub refusal_phrases: Vec<String>,
    pub ner_format_reminder: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            backend_id: "mock".into(),
            max_output_tokens: 512,
            temperature: 0.0,
            refusal_phrases: [
                "i'm sorry, but i can",
                "i am sorry, but i can",
                "i cannot help with",
                "i can't help with",
                "as an ai language model",
                "لا أستطيع المساعدة",
                "عذرا، لا يمكنني",
            ]
            .map(String::from)
            .to_vec(),
            ner_format_reminder: "Your previous answer did not follow the format. Answer only with lines of the form `category: surface`, category being symptom, condition or drug, or the single word `none`.".into(),
        }
    }
}

/// Runs the preprocessing layers for single records over a gateway.
pub struct Preprocessor<'a> {
    gateway: &'a Gateway,
    templates: Templates,
    config: PreprocessConfig,
    lexicon: &'a Lexicon,
}

impl<'a> Preprocessor<'a> {
    pub fn new(gateway: &'a Gateway, config: PreprocessConfig) -> Self {
        Self { gateway, templates: Templates::bundled(), config, lexicon: Lexicon::bundled() }
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    fn source(&self, record: &ComplaintRecord) -> Result<String, PreprocessError> {
        let text = scrub_pii(&record.text);
        if text.trim().is_empty() {
            return Err(PreprocessError::EmptyText(record.id.clone()));
        }
        Ok(text)
    }

    fn ask(&self, tpl: &PromptTemplate, text: &str, extra_system: Option<&str>) -> Result<String, GatewayError> {
        let mut system = tpl.system.clone();
        if let Some(extra) = extra_system {
            system.push_str("\n\n");
            system.push_str(extra);
        }
        let req = CompletionRequest {
            prompt: tpl.render(text),
            system: Some(system),
            max_output_tokens: self.config.max_output_tokens,
            temperature: self.config.temperature,
            backend_id: self.config.backend_id.clone(),
            reproducible: self.config.temperature == 0.0,
        };
        self.gateway.complete(&req)
    }

    fn check_refusal(&self, record: &ComplaintRecord, out: &str) -> Result<(), PreprocessError> {
        let lc = out.to_lowercase();
        match self.config.refusal_phrases.iter().find(|p| lc.contains(&p.to_lowercase())) {
            Some(p) => Err(PreprocessError::RefusalDetected { record_id: record.id.clone(), phrase: p.clone() }),
            None => Ok(()),
        }
    }

    pub fn refine(&self, record: &ComplaintRecord) -> Result<String, PreprocessError> {
        let src = self.source(record)?;
        let out = self.ask(&self.templates.refine, &src, None)?;
        self.check_refusal(record, &out)?;
        let out = out.trim().to_string();
        if out.is_empty() {
            return Err(PreprocessError::EmptyOutput(record.id.clone(), "refine"));
        }
        Ok(out)
    }

    /// Summary no longer than the source; longer model output is cut at a
    /// sentence boundary.
    pub fn summarize(&self, record: &ComplaintRecord) -> Result<String, PreprocessError> {
        let src = self.source(record)?;
        let out = self.ask(&self.templates.summarize, &src, None)?;
        self.check_refusal(record, &out)?;
        let out = out.trim();
        if out.is_empty() {
            return Err(PreprocessError::EmptyOutput(record.id.clone(), "summarize"));
        }
        let limit = src.chars().count();
        if out.chars().count() <= limit {
            return Ok(out.to_string());
        }
        log::warn!("summary for `{}` longer than its source; truncating", record.id);
        Ok(truncate_at_sentence(out, limit))
    }

    /// Entities in order of first mention. One reprompt with a format
    /// reminder is made when the first answer does not parse.
    pub fn extract_entities(&self, record: &ComplaintRecord) -> Result<Vec<Entity>, PreprocessError> {
        let src = self.source(record)?;
        let first = self.ask(&self.templates.ner, &src, None)?;
        self.check_refusal(record, &first)?;
        match parse_entities(&first, &src, self.lexicon) {
            Ok(e) => Ok(e),
            Err(reason) => {
                log::info!("reprompting entity extraction for `{}`: {reason}", record.id);
                let second = self.ask(&self.templates.ner, &src, Some(&self.config.ner_format_reminder))?;
                self.check_refusal(record, &second)?;
                parse_entities(&second, &src, self.lexicon)
                    .map_err(|reason| PreprocessError::ParseFailure { record_id: record.id.clone(), reason })
            }
        }
    }
}

/// Longest prefix of whole sentences within `limit` characters, or a hard
/// character cut when even the first sentence is too long.
fn truncate_at_sentence(text: &str, limit: usize) -> String {
    let mut end = 0;
    for (_, b) in sentence_spans(text) {
        if text[..b].trim().chars().count() <= limit {
            end = b;
        } else {
            break;
        }
    }
    if end > 0 {
        text[..end].trim().to_string()
    } else {
        text.chars().take(limit).collect::<String>().trim().to_string()
    }
}
