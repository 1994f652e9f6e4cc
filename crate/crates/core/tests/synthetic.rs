//! The bundled corpus must carry a learnable signal. Checked with a plain
//! bag-of-words softmax regression that shares no code with the trainer.

use std::collections::HashMap;

use medcascade::corpus::{stratified_split, ComplaintRecord, SplitRatios};
use medcascade::synthetic::{generate, DEFAULT_SEED, DEFAULT_SIZE};

fn bag(text: &str, vocab: &mut HashMap<String, usize>, grow: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let w = w.to_lowercase();
        let next = vocab.len();
        match vocab.get(&w) {
            Some(&i) => out.push(i),
            None if grow => {
                vocab.insert(w, next);
                out.push(next);
            }
            None => {}
        }
    }
    out
}

fn fit_and_score(train: &[ComplaintRecord], test: &[ComplaintRecord], label: fn(&ComplaintRecord) -> &str) -> (f64, f64) {
    let mut vocab = HashMap::new();
    let xs: Vec<Vec<usize>> = train.iter().map(|r| bag(&r.text, &mut vocab, true)).collect();
    let mut classes: Vec<&str> = train.iter().map(label).collect();
    classes.sort();
    classes.dedup();
    let ys: Vec<usize> = train.iter().map(|r| classes.iter().position(|c| *c == label(r)).unwrap()).collect();
    let (v, k) = (vocab.len(), classes.len());
    let mut w = vec![vec![0.0f64; v + 1]; k];

    for _ in 0..200 {
        for (x, &y) in xs.iter().zip(&ys) {
            let z: Vec<f64> = w.iter().map(|row| row[v] + x.iter().map(|&i| row[i]).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|s| (s - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / tot - f64::from(u8::from(c == y));
                w[c][v] -= 0.1 * g;
                for &i in x {
                    w[c][i] -= 0.1 * g;
                }
            }
        }
    }

    let predict = |x: &[usize]| {
        (0..k)
            .max_by(|&a, &b| {
                let s = |c: usize| w[c][v] + x.iter().map(|&i| w[c][i]).sum::<f64>();
                s(a).total_cmp(&s(b)).then(b.cmp(&a))
            })
            .unwrap()
    };
    let hits = test
        .iter()
        .filter(|r| classes[predict(&bag(&r.text, &mut vocab, false))] == label(r))
        .count();
    let acc = hits as f64 / test.len() as f64;

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in test {
        *counts.entry(label(r)).or_default() += 1;
    }
    let majority = *counts.values().max().unwrap() as f64 / test.len() as f64;
    (acc, majority)
}

#[test]
fn bag_of_words_beats_majority_on_both_tasks() {
    let (records, _) = generate(DEFAULT_SIZE, DEFAULT_SEED);
    let s = stratified_split(&records, SplitRatios::default(), 7).unwrap();
    let (ty, ty_major) = fit_and_score(&s.train, &s.test, |r| &r.labels.condition_type);
    let (sev, sev_major) = fit_and_score(&s.train, &s.test, |r| &r.labels.severity);
    assert!(ty >= 0.9 && ty > ty_major + 0.2, "type {ty} vs {ty_major}");
    assert!(sev >= 0.9 && sev > sev_major + 0.2, "severity {sev} vs {sev_major}");
}
