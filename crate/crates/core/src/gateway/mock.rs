//! Deterministic stand-in for a generative model.
//!
//! * `REFINE:` collapses whitespace and prepends an `Age:` header for every
//!   digit run followed by an age word.
//! * `SUMMARIZE:` keeps the first two sentences.
//! * `NER:` lists, comma-separated, the payload tokens found in the lexicon.

use super::{Backend, CompletionRequest, GatewayError};
use crate::lexicon::{word_tokens, Lexicon};

pub const REFINE_SENTINEL: &str = "REFINE:";
pub const SUMMARIZE_SENTINEL: &str = "SUMMARIZE:";
pub const NER_SENTINEL: &str = "NER:";

const AGE_WORDS: &[&str] = &[
    "year", "years", "yo", "y/o", "سنة", "سنه", "سنين", "سنوات", "عام", "عاما", "عامًا",
];

#[derive(Clone, Debug)]
pub struct MockBackend {
    lexicon: Lexicon,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self { lexicon: Lexicon::bundled().clone() }
    }
}

impl MockBackend {
    pub fn with_lexicon(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        mock_complete_with(req, &self.lexicon)
    }
}

/// Mock completion using the bundled lexicon.
pub fn mock_complete(req: &CompletionRequest) -> Result<String, GatewayError> {
    mock_complete_with(req, Lexicon::bundled())
}

fn mock_complete_with(req: &CompletionRequest, lexicon: &Lexicon) -> Result<String, GatewayError> {
    let prompt = req.prompt.trim_start();
    if let Some(payload) = prompt.strip_prefix(REFINE_SENTINEL) {
        Ok(refine(payload))
    } else if let Some(payload) = prompt.strip_prefix(SUMMARIZE_SENTINEL) {
        Ok(first_sentences(&collapse_ws(payload), 2))
    } else if let Some(payload) = prompt.strip_prefix(NER_SENTINEL) {
        let hits: Vec<&str> = word_tokens(payload).filter(|t| lexicon.lookup(t).is_some()).collect();
        Ok(hits.join(", "))
    } else {
        let head: String = prompt.chars().take(24).collect();
        Err(GatewayError::UnknownSentinel(head))
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn refine(payload: &str) -> String {
    let body = collapse_ws(payload);
    let words: Vec<&str> = body.split(' ').collect();
    let ages: Vec<&str> = words
        .windows(2)
        .filter(|w| !w[0].is_empty() && w[0].chars().all(|c| c.is_numeric()))
        .filter(|w| {
            let next = w[1].trim_matches(|c: char| !c.is_alphanumeric() && c != '/').to_lowercase();
            AGE_WORDS.contains(&next.as_str())
        })
        .map(|w| w[0])
        .collect();
    if ages.is_empty() {
        body
    } else {
        format!("Age: {}\n{body}", ages.join(", "))
    }
}

/// First `n` sentences of `text`. A sentence ends at `.`, `!`, `?` or `؟`
/// followed by whitespace or end of text.
pub(crate) fn first_sentences(text: &str, n: usize) -> String {
    sentence_spans(text).into_iter().take(n).map(|(a, b)| text[a..b].trim()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut it = text.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        if matches!(c, '.' | '!' | '?' | '؟') {
            let at_break = it.peek().is_none_or(|(_, n)| n.is_whitespace());
            if at_break {
                let end = i + c.len_utf8();
                if !text[start..end].trim().is_empty() {
                    spans.push((start, end));
                }
                start = end;
            }
        }
    }
    if !text[start..].trim().is_empty() {
        spans.push((start, text.len()));
    }
    spans
}
