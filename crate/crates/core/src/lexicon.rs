//! Bundled medical lexicon used by the mock LLM and the entity parser.

use std::collections::HashMap;
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityCategory {
    Symptom,
    Condition,
    Drug,
}

impl EntityCategory {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "symptom" | "symptoms" | "عرض" | "أعراض" => Some(Self::Symptom),
            "condition" | "conditions" | "disease" | "مرض" | "حالة" => Some(Self::Condition),
            "drug" | "drugs" | "medication" | "دواء" | "علاج" => Some(Self::Drug),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Symptom => "symptom",
            Self::Condition => "condition",
            Self::Drug => "drug",
        }
    }
}

impl fmt::Display for EntityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Surface form -> category, keyed by lowercased surface.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: HashMap<String, EntityCategory>,
}

static BUNDLED: LazyLock<Lexicon> =
    LazyLock::new(|| Lexicon::parse_tsv(include_str!("../data/lexicon.tsv")));

impl Lexicon {
    pub fn bundled() -> &'static Lexicon {
        &BUNDLED
    }

    pub fn parse_tsv(src: &str) -> Self {
        let entries = src
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let (surface, cat) = l.split_once('\t')?;
                Some((surface.trim().to_lowercase(), EntityCategory::parse(cat)?))
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries<I: IntoIterator<Item = (S, EntityCategory)>, S: AsRef<str>>(it: I) -> Self {
        Self { entries: it.into_iter().map(|(s, c)| (s.as_ref().to_lowercase(), c)).collect() }
    }

    pub fn lookup(&self, surface: &str) -> Option<EntityCategory> {
        self.entries.get(&surface.trim().to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Split text into word tokens, dropping punctuation.
pub fn word_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || is_arabic_mark(c)))
        .filter(|t| !t.is_empty())
}

// Arabic diacritics are combining marks, not alphanumerics.
fn is_arabic_mark(c: char) -> bool {
    matches!(c, '\u{064B}'..='\u{065F}' | '\u{0670}')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lexicon_loads() {
        let lex = Lexicon::bundled();
        assert!(lex.len() > 40);
        assert_eq!(lex.lookup("Headache"), Some(EntityCategory::Symptom));
        assert_eq!(lex.lookup("كونكور"), Some(EntityCategory::Drug));
        assert_eq!(lex.lookup("table"), None);
    }

    #[test]
    fn tokens_split_on_punctuation() {
        let t: Vec<_> = word_tokens("headache, fever. صداع؟ و(حمى)").collect();
        assert_eq!(t, ["headache", "fever", "صداع", "و", "حمى"]);
    }
}
