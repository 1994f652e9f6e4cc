//! Parser for the line-oriented entity format `category: surface`.
//!
//! A single unlabeled line of short comma-separated items is also accepted;
//! those items take their category from the lexicon, defaulting to symptom.

use serde::{Deserialize, Serialize};

use crate::lexicon::{EntityCategory, Lexicon};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub category: EntityCategory,
    /// True when `surface` does not occur verbatim in the source text.
    #[serde(default)]
    pub normalized: bool,
}

const EMPTY_ANSWERS: &[&str] = &["none", "no entities", "لا يوجد", "لا شيء"];
const MAX_UNLABELED_WORDS: usize = 4;

pub fn parse_entities(output: &str, source: &str, lexicon: &Lexicon) -> Result<Vec<Entity>, String> {
    let trimmed = output.trim();
    if trimmed.is_empty() || EMPTY_ANSWERS.contains(&trimmed.trim_end_matches('.').to_lowercase().as_str()) {
        return Ok(Vec::new());
    }
    let lines: Vec<&str> = trimmed.lines().map(strip_bullet).filter(|l| !l.is_empty()).collect();
    let labeled = lines.iter().any(|l| l.split_once(':').is_some_and(|(lab, _)| EntityCategory::parse(lab).is_some()));

    let mut raw: Vec<(String, EntityCategory)> = Vec::new();
    if !labeled && lines.len() == 1 {
        for item in split_items(lines[0]) {
            if item.split_whitespace().count() > MAX_UNLABELED_WORDS || item.contains(['.', '!', '?', '؟', ':']) {
                return Err(format!("unlabeled item `{item}` is not an entity"));
            }
            let cat = lexicon.lookup(&item).unwrap_or(EntityCategory::Symptom);
            raw.push((item, cat));
        }
    } else {
        for line in &lines {
            let Some((label, rest)) = line.split_once(':') else {
                return Err(format!("line `{line}` is not `category: surface`"));
            };
            match EntityCategory::parse(label) {
                Some(cat) => raw.extend(split_items(rest).into_iter().map(|s| (s, cat))),
                None => log::info!("dropping entity line with unknown category `{}`", label.trim()),
            }
        }
    }

    let source_lc = source.to_lowercase();
    let mut out: Vec<Entity> = Vec::new();
    for (surface, category) in raw {
        if out.iter().any(|e| e.surface == surface && e.category == category) {
            continue;
        }
        let normalized = !source_lc.contains(&surface.to_lowercase());
        out.push(Entity { surface, category, normalized });
    }
    Ok(out)
}

fn strip_bullet(line: &str) -> &str {
    let l = line.trim();
    let l = l.trim_start_matches(['-', '*', '•']).trim_start();
    match l.split_once(['.', ')']) {
        Some((num, rest)) if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) => rest.trim(),
        _ => l,
    }
}

fn split_items(s: &str) -> Vec<String> {
    s.split([',', '،', ';', '؛'])
        .map(|i| {
            let i = i.trim().trim_matches(|c: char| matches!(c, '`' | '"' | '\'')).trim();
            let i = i.strip_prefix("and ").unwrap_or(i);
            i.trim_end_matches(['.', '!']).trim().to_string()
        })
        .filter(|i| !i.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(out: &str, src: &str) -> Result<Vec<Entity>, String> {
        parse_entities(out, src, Lexicon::bundled())
    }

    fn surfaces(v: &[Entity]) -> Vec<&str> {
        v.iter().map(|e| e.surface.as_str()).collect()
    }

    #[test]
    fn labeled_lines() {
        let src = "she has diarrhea and takes concor";
        let e = parse("symptom: diarrhea\ndrug: concor\ncondition: diabetes", src).unwrap();
        assert_eq!(surfaces(&e), ["diarrhea", "concor", "diabetes"]);
        assert_eq!(e[1].category, EntityCategory::Drug);
        assert!(!e[0].normalized);
        assert!(e[2].normalized);
    }

    #[test]
    fn comma_list_fallback_dedups() {
        let e = parse("fever, fever", "fever").unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0], Entity { surface: "fever".into(), category: EntityCategory::Symptom, normalized: false });
        let e = parse("صداع، كونكور", "صداع و كونكور").unwrap();
        assert_eq!(e[1].category, EntityCategory::Drug);
    }

    #[test]
    fn empty_answers() {
        assert!(parse("", "x").unwrap().is_empty());
        assert!(parse("None.", "x").unwrap().is_empty());
    }

    #[test]
    fn unknown_categories_are_dropped() {
        let e = parse("symptom: cough\nbody part: chest\n- drug: insulin", "cough insulin").unwrap();
        assert_eq!(surfaces(&e), ["cough", "insulin"]);
    }

    #[test]
    fn prose_is_a_parse_failure() {
        assert!(parse("The patient appears to suffer from several issues. Please see a doctor.", "x").is_err());
        assert!(parse("symptom: cough\nthe rest is prose", "x").is_err());
    }

    #[test]
    fn numbered_lists() {
        let e = parse("1. symptom: nausea\n2) symptom: bloating, vomiting", "").unwrap();
        assert_eq!(surfaces(&e), ["nausea", "bloating", "vomiting"]);
    }
}
