use std::borrow::Cow;
use std::sync::LazyLock;

use regex::Regex;

pub const PLACEHOLDERS: [&str; 4] = ["<URL>", "<EMAIL>", "<ID>", "<PHONE>"];

// Order matters: URLs can embed addresses and digit runs, and a 14-digit
// national ID must win over the phone pattern.
static PATTERNS: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        (Regex::new(r"(?i)\b(?:https?://|www\.)[^\s<>]*[^\s<>.,;:!?)\]،]").unwrap(), "<URL>"),
        (
            Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,}").unwrap(),
            "<EMAIL>",
        ),
        (Regex::new(r"\b\d{14}\b").unwrap(), "<ID>"),
        (Regex::new(r"(?:\+\d|\b\d)(?:[ \-]?\d){7,12}\b").unwrap(), "<PHONE>"),
    ]
});

/// Replace phone numbers, e-mail addresses, URLs and 14-digit national IDs
/// with fixed placeholder tokens. Everything else is left as is.
pub fn scrub_pii(text: &str) -> String {
    let mut out = Cow::Borrowed(text);
    for (re, token) in PATTERNS.iter() {
        if let Cow::Owned(s) = re.replace_all(&out, *token) {
            out = Cow::Owned(s);
        }
    }
    out.into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Hand-checked fixture set.
    const FIXTURES: [(&str, &str); 30] = [
        ("call me 01234567890", "call me <PHONE>"),
        ("a@b.com a@b.com", "<EMAIL> <EMAIL>"),
        ("no pii here, just a headache", "no pii here, just a headache"),
        ("عندي صداع من 3 ايام", "عندي صداع من 3 ايام"),
        ("رقمي 01012345678 شكرا", "رقمي <PHONE> شكرا"),
        ("phone: +20 100 123 4567", "phone: <PHONE>"),
        ("call 010-1234-5678 now", "call <PHONE> now"),
        ("id 29801011234567 please", "id <ID> please"),
        ("الرقم القومي 29801011234567", "الرقم القومي <ID>"),
        ("mail john.doe+x@mail.example.org today", "mail <EMAIL> today"),
        ("see https://example.com/path?q=1 for info", "see <URL> for info"),
        ("see http://a.b", "see <URL>"),
        ("visit www.clinic.eg/page", "visit <URL>"),
        ("HTTPS://EXAMPLE.COM", "<URL>"),
        ("https://x.com/u@y.com", "<URL>"),
        ("age 65 years, concor 5mg", "age 65 years, concor 5mg"),
        ("blood pressure 140/90", "blood pressure 140/90"),
        ("sugar 250 mg/dl", "sugar 250 mg/dl"),
        ("عمري 45 سنة ووزني 80", "عمري 45 سنة ووزني 80"),
        ("since 2019", "since 2019"),
        ("1234567 is seven digits", "1234567 is seven digits"),
        ("12345678 is eight digits", "<PHONE> is eight digits"),
        ("٠١٠١٢٣٤٥٦٧٨ رقم", "<PHONE> رقم"),
        ("call 01234567890 or 01098765432", "call <PHONE> or <PHONE>"),
        ("email me at a_b@c-d.net.", "email me at <EMAIL>."),
        ("<PHONE> already scrubbed", "<PHONE> already scrubbed"),
        ("1234567890123456789 long run", "1234567890123456789 long run"),
        ("x@y", "x@y"),
        ("", ""),
        ("contact: a@b.co, www.x.org, 0123456789", "contact: <EMAIL>, <URL>, <PHONE>"),
    ];

    #[test]
    fn fixture_set() {
        for (input, expected) in FIXTURES {
            assert_eq!(scrub_pii(input), expected, "input: {input:?}");
        }
    }

    #[test]
    fn fixtures_are_fixed_points() {
        for (_, expected) in FIXTURES {
            assert_eq!(scrub_pii(expected), expected);
        }
    }

    fn placeholder_count(s: &str) -> usize {
        PLACEHOLDERS.iter().map(|p| s.matches(p).count()).sum()
    }

    proptest! {
        #[test]
        fn idempotent_and_length_bounded(s in "[a-z0-9 @.+/:\\-ءاب٠١٢]{0,60}") {
            let once = scrub_pii(&s);
            prop_assert_eq!(scrub_pii(&once), once.clone());
            let added = placeholder_count(&once).saturating_sub(placeholder_count(&s));
            prop_assert!(once.chars().count() <= s.chars().count() + 7 * added);
        }
    }
}
