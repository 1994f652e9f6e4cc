use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ComplaintRecord, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let r = self.as_array();
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SplitError::InvalidRatios(r));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.8, 0.1, 0.1)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ComplaintRecord>,
    pub val: Vec<ComplaintRecord>,
    pub test: Vec<ComplaintRecord>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("class `{class}` has {count} records, needs at least {needed}")]
    ClassTooSmall { class: String, count: usize, needed: usize },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
}

/// Stratified split on the condition type label.
pub fn stratified_split(
    records: &[ComplaintRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits, SplitError> {
    stratified_split_by(records, ratios, seed, Task::Type)
}

/// Partition `records` into train/val/test so that every class of `key`
/// lands in each split in proportion to `ratios` (within one record).
/// Records keep their input order inside each split.
pub fn stratified_split_by(
    records: &[ComplaintRecord],
    ratios: SplitRatios,
    seed: u64,
    key: Task,
) -> Result<Splits, SplitError> {
    ratios.validate()?;
    let r = ratios.as_array();
    let needed = r.iter().filter(|x| **x > 0.0).count();

    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let label = rec.labels.get(key).unwrap_or("");
        classes.entry(label).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; records.len()];
    for (class, mut members) in classes {
        if members.len() < needed {
            return Err(SplitError::ClassTooSmall {
                class: class.to_string(),
                count: members.len(),
                needed,
            });
        }
        let counts = allocate(members.len(), r);
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (split, &n) in counts.iter().enumerate() {
            for idx in it.by_ref().take(n) {
                assignment[idx] = split;
            }
        }
    }

    let mut out = Splits::default();
    for (rec, split) in records.iter().zip(assignment) {
        match split {
            0 => out.train.push(rec.clone()),
            1 => out.val.push(rec.clone()),
            _ => out.test.push(rec.clone()),
        }
    }
    Ok(out)
}

/// Largest-remainder allocation of `n` items, then at least one item for
/// every split with a non-zero ratio.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| n as f64 * r);
    let mut counts = ideal.map(|x| x.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>().min(n);
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3)
                .filter(|&j| counts[j] > 1)
                .max_by(|&a, &b| {
                    let sa = counts[a] as f64 - ideal[a];
                    let sb = counts[b] as f64 - ideal[b];
                    sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
                })
                .expect("caller guarantees enough records");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn rec(i: usize, class: &str) -> ComplaintRecord {
        ComplaintRecord {
            id: format!("r{i}"),
            text: format!("text {i}"),
            age: None,
            gender: None,
            labels: LabelSet { diagnosis: None, condition_type: class.into(), severity: "mild".into() },
        }
    }

    #[test]
    fn ten_records_one_class() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, "a")).collect();
        let s = stratified_split(&recs, SplitRatios::new(0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let again = stratified_split(&recs, SplitRatios::new(0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn class_too_small() {
        let mut recs: Vec<_> = (0..10).map(|i| rec(i, "a")).collect();
        recs.push(rec(10, "tiny"));
        recs.push(rec(11, "tiny"));
        let err = stratified_split(&recs, SplitRatios::default(), 1).unwrap_err();
        assert!(matches!(err, SplitError::ClassTooSmall { ref class, count: 2, needed: 3 } if class == "tiny"));
    }

    #[test]
    fn bad_ratios() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, "a")).collect();
        assert!(matches!(
            stratified_split(&recs, SplitRatios::new(0.5, 0.5, 0.5), 1),
            Err(SplitError::InvalidRatios(_))
        ));
    }

    #[test]
    fn different_seeds_differ() {
        let recs: Vec<_> = (0..40).map(|i| rec(i, "a")).collect();
        let a = stratified_split(&recs, SplitRatios::default(), 1).unwrap();
        let b = stratified_split(&recs, SplitRatios::default(), 2).unwrap();
        assert_ne!(a.test, b.test);
    }

    proptest! {
        #[test]
        fn partition_and_proportions(
            sizes in prop::collection::vec(3usize..40, 1..5),
            train in 0.5f64..0.9,
            val_share in 0.2f64..0.8,
            seed in any::<u64>(),
        ) {
            let val = (1.0 - train) * val_share;
            let ratios = SplitRatios::new(train, val, 1.0 - train - val);
            let mut recs = Vec::new();
            for (c, n) in sizes.iter().enumerate() {
                for _ in 0..*n {
                    let i = recs.len();
                    recs.push(rec(i, &format!("c{c}")));
                }
            }
            let s = stratified_split(&recs, ratios, seed).unwrap();
            let ids: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).map(|r| r.id.clone()).collect();
            prop_assert_eq!(ids.len(), recs.len());
            prop_assert_eq!(ids.iter().collect::<HashSet<_>>().len(), recs.len());
            for (c, n) in sizes.iter().enumerate() {
                let class = format!("c{c}");
                // the one-per-split floor can push a tiny class past the bound
                let unforced = ratios.as_array().iter().all(|r| *n as f64 * r >= 1.0);
                for (part, r) in [&s.train, &s.val, &s.test].iter().zip(ratios.as_array()) {
                    let got = part.iter().filter(|x| x.labels.condition_type == class).count() as f64;
                    let ideal = *n as f64 * r;
                    if unforced {
                        prop_assert!((got - ideal).abs() <= 1.0 + 1e-9, "class {} got {} ideal {}", class, got, ideal);
                    }
                    prop_assert!(got >= 1.0);
                }
            }
            prop_assert_eq!(s, stratified_split(&recs, ratios, seed).unwrap());
        }
    }
}
