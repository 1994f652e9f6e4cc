//! Deterministic Arabic complaint corpus with planted label signal.
//!
//! Each record carries a marker phrase for its condition type in the first
//! sentence and one for its severity in the second, surrounded by symptom
//! words from the bundled lexicon, filler and some contact details for the
//! PII scrubber. The bundled copy under `data/synthetic/` is this generator's
//! output for [`DEFAULT_SEED`].

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ComplaintRecord, CorpusManifest, Gender, LabelSet, Vocabularies};

pub const DEFAULT_SEED: u64 = 2024;
pub const DEFAULT_SIZE: usize = 200;

pub const BUNDLED_JSONL: &str = include_str!("../data/synthetic/complaints.jsonl");
pub const BUNDLED_MANIFEST: &str = include_str!("../data/synthetic/complaints.manifest.json");

const TYPES: [&str; 3] = ["chronic", "acute", "recurrent"];
/// Out of 20: chronic 10, acute 7, recurrent 3.
const TYPE_SHARE: [usize; 3] = [10, 7, 3];
const SEVERITIES: [&str; 2] = ["mild", "severe"];
const SEVERITY_SHARE: [usize; 2] = [13, 7];

const TYPE_MARKERS: [&[&str]; 3] = [
    &["والموضوع ده مزمن معايا من سنين", "وده مرض مزمن عندي"],
    &["والتعب جالي فجأة من امبارح", "وبدأ فجأة النهارده الصبح"],
    &["وبيرجعلي كل شهر تقريبا", "والنوبة بتتكرر كل كام أسبوع"],
];
const SEVERITY_MARKERS: [&[&str]; 2] = [
    &["الألم خفيف ومش مأثر على يومي.", "الأعراض بسيطة ومحتملة."],
    &["الألم شديد جدا ومش قادر أتحرك.", "الوجع جامد جدا ومش بنام."],
];
const OPENERS: [&str; 5] = ["السلام عليكم يا دكتور،", "مساء الخير،", "لو سمحت محتاج استشارة،", "أهلا دكتور،", "عندي سؤال،"];
const SYMPTOMS: [&str; 12] = ["صداع", "حمى", "كحة", "غثيان", "إسهال", "إمساك", "انتفاخ", "دوخة", "طفح", "حكة", "أرق", "تنميل"];
const FILLERS: [&str; 6] = [
    "جربت أدوية كتير من الصيدلية.",
    "ياريت حد يرد عليا بسرعة.",
    "مش عارف أروح لأنهي تخصص.",
    "قريت على النت بس خفت أكتر.",
    "شكرا مقدما على الرد.",
    "أخدت باراسيتامول ومفيش فايدة.",
];
const DIAGNOSES: [&str; 4] = ["gastritis", "migraine", "dermatitis", "influenza"];

pub fn vocabularies() -> Vocabularies {
    let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    Vocabularies { condition_type: owned(&TYPES), severity: owned(&SEVERITIES), diagnosis: owned(&DIAGNOSES) }
}

fn quota(i: usize, share: &[usize]) -> usize {
    let total: usize = share.iter().sum();
    let mut slot = i % total;
    for (k, &n) in share.iter().enumerate() {
        if slot < n {
            return k;
        }
        slot -= n;
    }
    unreachable!()
}

fn diagnosis_for(symptom: &str) -> &'static str {
    match symptom {
        "غثيان" | "إسهال" | "إمساك" | "انتفاخ" => "gastritis",
        "صداع" | "دوخة" | "أرق" | "تنميل" => "migraine",
        "طفح" | "حكة" => "dermatitis",
        _ => "influenza",
    }
}

/// Generate `n` records. Label counts follow fixed quotas so class sizes are
/// imbalanced but exact; text details are drawn from a seeded RNG.
pub fn generate(n: usize, seed: u64) -> (Vec<ComplaintRecord>, CorpusManifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let ty = quota(i, &TYPE_SHARE);
        // offset the severity cycle so it is independent of type
        let sev = quota(i * 7 + 3, &SEVERITY_SHARE);
        let age: u32 = rng.random_range(18..=75);
        let s1 = *SYMPTOMS.choose(&mut rng).unwrap();
        let s2 = *SYMPTOMS.choose(&mut rng).unwrap();
        let mut text = format!(
            "{} عندي {age} سنة وعندي {s1} و{s2} {}. {} {}",
            OPENERS.choose(&mut rng).unwrap(),
            TYPE_MARKERS[ty].choose(&mut rng).unwrap(),
            SEVERITY_MARKERS[sev].choose(&mut rng).unwrap(),
            FILLERS.choose(&mut rng).unwrap(),
        );
        match rng.random_range(0..10) {
            0 => text.push_str(&format!(" رقمي 010{:08}", rng.random_range(0..100_000_000u32))),
            1 => text.push_str(&format!(" ابعتلي على patient{i}@example.com")),
            _ => {}
        }
        let gender = match rng.random_range(0..3) {
            0 => Gender::Male,
            1 => Gender::Female,
            _ => Gender::Unspecified,
        };
        records.push(ComplaintRecord {
            id: format!("syn-{i:03}"),
            text,
            age: Some(age),
            gender: Some(gender),
            labels: LabelSet {
                diagnosis: Some(diagnosis_for(s1).to_string()),
                condition_type: TYPES[ty].to_string(),
                severity: SEVERITIES[sev].to_string(),
            },
        });
    }
    let mut manifest = CorpusManifest::new(vocabularies());
    manifest.record_count = Some(n);
    (records, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, records_to_jsonl, write_corpus, CorpusFormat};
    use std::collections::BTreeMap;

    #[test]
    fn bundled_copy_matches_generator() {
        let (records, manifest) = generate(DEFAULT_SIZE, DEFAULT_SEED);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("complaints.jsonl");
        write_corpus(&path, &records, &manifest).unwrap();
        if std::env::var_os("MEDCASCADE_REGENERATE").is_some() {
            let out = concat!(env!("CARGO_MANIFEST_DIR"), "/data/synthetic/complaints.jsonl");
            write_corpus(std::path::Path::new(out), &records, &manifest).unwrap();
        }
        assert_eq!(std::fs::read_to_string(&path).unwrap(), BUNDLED_JSONL);
        assert_eq!(
            std::fs::read_to_string(crate::corpus::manifest_path_for(&path)).unwrap(),
            BUNDLED_MANIFEST
        );
        let (loaded, _) = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(records_to_jsonl(&loaded), records_to_jsonl(&records));
    }

    #[test]
    fn class_counts_are_exact_and_imbalanced() {
        let (records, _) = generate(DEFAULT_SIZE, DEFAULT_SEED);
        let mut ty = BTreeMap::new();
        let mut sev = BTreeMap::new();
        for r in &records {
            *ty.entry(r.labels.condition_type.as_str()).or_insert(0) += 1;
            *sev.entry(r.labels.severity.as_str()).or_insert(0) += 1;
        }
        assert_eq!(ty, BTreeMap::from([("chronic", 100), ("acute", 70), ("recurrent", 30)]));
        assert_eq!(sev, BTreeMap::from([("mild", 130), ("severe", 70)]));
    }

    #[test]
    fn every_record_carries_its_markers() {
        let (records, _) = generate(DEFAULT_SIZE, DEFAULT_SEED);
        for r in &records {
            let ty = TYPES.iter().position(|t| *t == r.labels.condition_type).unwrap();
            let sev = SEVERITIES.iter().position(|t| *t == r.labels.severity).unwrap();
            assert!(TYPE_MARKERS[ty].iter().any(|m| r.text.contains(m)));
            assert!(SEVERITY_MARKERS[sev].iter().any(|m| r.text.contains(m)));
            for (other, markers) in TYPE_MARKERS.iter().enumerate() {
                if other != ty {
                    assert!(!markers.iter().any(|m| r.text.contains(m)));
                }
            }
        }
        assert!(records.iter().any(|r| r.text.contains("@example.com")));
        assert!(records.iter().any(|r| r.text.contains(" رقمي 010")));
    }
}
