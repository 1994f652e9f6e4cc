use std::collections::BTreeMap;

use medcascade::adapter::LoraConfig;
use medcascade::corpus::{LabelSet, Task};
use medcascade::evaluator::*;
use medcascade::trainer::{MultiTaskModel, Pooling, TinyEncoder, TinyEncoderConfig};
use medcascade::variants::{Condition, DatasetVariant, Provenance, VariantExample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stored predictions for a 100-example normal-text test split with 79 Type
/// hits and 63 Severity hits.
fn stored_fixture() -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let type_golds: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let type_preds: Vec<usize> = type_golds.iter().enumerate().map(|(i, &g)| if i < 79 { g } else { 1 - g }).collect();
    let sev_golds: Vec<usize> = (0..100).map(|i| usize::from(i % 3 == 0)).collect();
    let sev_preds: Vec<usize> = sev_golds.iter().enumerate().map(|(i, &g)| if i >= 37 { g } else { 1 - g }).collect();
    (type_preds, type_golds, sev_preds, sev_golds)
}

#[test]
fn stored_predictions_render_expected_row() {
    let (tp, tg, sp, sg) = stored_fixture();
    let t = accuracy(&tp, &tg).unwrap();
    let s = accuracy(&sp, &sg).unwrap();
    assert_eq!(t, 0.79);
    assert_eq!(s, 0.63);
    let labels = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let cell = CellResult {
        model: "Bert-base-arabic-camelbert".into(),
        condition: Condition::Normal,
        fine_tuned: true,
        scores: BTreeMap::from([
            (Task::Type, TaskScores::from_predictions(Task::Type, &labels(&["chronic", "acute"]), &tp, &tg).unwrap()),
            (Task::Severity, TaskScores::from_predictions(Task::Severity, &labels(&["mild", "severe"]), &sp, &sg).unwrap()),
        ]),
    };
    let dir = tempfile::tempdir().unwrap();
    render_report(&[cell], dir.path()).unwrap();
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| Normal Text | Bert-base-arabic-camelbert | 79% | 63% | 71% | - | - | - |"), "{md}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"][0]["fine_tuned"]["avg_percent"], 71);
    assert!(json["cells"][0]["scores"]["type"]["balanced_accuracy"].as_f64().unwrap() > 0.0);
}

#[test]
fn random_predictions_sit_near_chance() {
    // K = 5 balanced, n = 10^4: accuracy ~ Binomial(n, 0.2)/n, sd = sqrt(0.2*0.8/n) = 0.004
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let golds: Vec<usize> = (0..n).map(|i| i % 5).collect();
    let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let acc = accuracy(&preds, &golds).unwrap();
    let sd = (0.2f64 * 0.8 / n as f64).sqrt();
    assert!((acc - 0.2).abs() < 3.0 * sd, "{acc}");
    let bal = balanced_accuracy(&preds, &golds, 5).unwrap();
    // balanced golds: both metrics agree to within 1/n
    assert!((acc - bal).abs() <= 1.0 / n as f64 + 1e-12);
}

fn model(zero_heads: bool) -> MultiTaskModel<TinyEncoder> {
    let enc = TinyEncoder::new(TinyEncoderConfig { vocab_size: 200, d_model: 8, max_seq_len: 16, seed: 4 });
    let labels = BTreeMap::from([
        (Task::Type, vec!["chronic".to_string(), "acute".into()]),
        (Task::Severity, vec!["mild".to_string(), "severe".into()]),
    ]);
    let mut m = MultiTaskModel::new(enc, labels, &[Task::Type, Task::Severity], &LoraConfig { rank: 2, ..Default::default() }, Pooling::Cls, 1)
        .unwrap();
    if zero_heads {
        for h in m.heads.values_mut() {
            h.weight.fill(0.0);
        }
    }
    m
}

fn dataset(labels: &[(&str, &str)]) -> DatasetVariant {
    let examples: Vec<VariantExample> = labels
        .iter()
        .enumerate()
        .map(|(i, (t, s))| VariantExample {
            record_id: format!("r{i}"),
            input_text: format!("complaint {i}"),
            labels: LabelSet { diagnosis: None, condition_type: t.to_string(), severity: s.to_string() },
        })
        .collect();
    DatasetVariant {
        condition: Condition::Normal,
        provenance: Provenance {
            condition: Condition::Normal,
            corpus_hash: String::new(),
            bundle_hash: String::new(),
            examples: examples.len(),
            empty_aux: vec![],
        },
        examples,
    }
}

#[test]
fn evaluate_with_tie_broken_heads() {
    // zero heads make every logit equal: the lowest index wins everywhere
    let m = model(true);
    let ds = dataset(&[("chronic", "mild"), ("chronic", "mild"), ("chronic", "mild")]);
    let ev = evaluate(&m, &ds, &[Task::Type, Task::Severity]).unwrap();
    for s in ev.scores.values() {
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.balanced_accuracy, 1.0);
        assert_eq!(s.confusion, vec![vec![3, 0], vec![0, 0]]);
    }
    assert_eq!(ev.predictions.len(), 6);
    assert_eq!(ev.predictions[0], PredictionRecord { record_id: "r0".into(), task: Task::Type, pred: "chronic".into(), gold: "chronic".into() });

    let mixed = dataset(&[("chronic", "mild"), ("acute", "severe"), ("acute", "mild"), ("chronic", "severe")]);
    let ev = evaluate(&m, &mixed, &[Task::Type]).unwrap();
    let s = &ev.scores[&Task::Type];
    assert_eq!(s.accuracy, 0.5);
    assert_eq!(s.balanced_accuracy, 0.5);
    // row sums are per-class gold counts
    assert_eq!(s.confusion.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![2, 2]);
}

#[test]
fn evaluate_errors() {
    let m = model(false);
    assert!(matches!(evaluate(&m, &dataset(&[]), &[Task::Type]), Err(EvalError::EmptyInput)));
    assert!(matches!(evaluate(&m, &dataset(&[("subacute", "mild")]), &[Task::Type]), Err(EvalError::VocabMismatch(_))));
    assert!(matches!(evaluate(&m, &dataset(&[("acute", "mild")]), &[Task::Diagnosis]), Err(EvalError::VocabMismatch(_))));
}

#[test]
fn reference_avg_cells() {
    // (type, severity, avg) reference triples, both arms
    let cells = [
        (73, 65, 69), (65, 65, 65), (79, 63, 71), (76, 66, 71), (62, 57, 60), (81, 61, 71),
        (75, 66, 71), (62, 64, 63), (83, 69, 76), (75, 64, 70), (63, 61, 62), (79, 64, 72),
        (17, 43, 30), (13, 40, 27), (15, 45, 30), (19, 40, 30), (16, 39, 28), (13, 49, 31),
        (20, 40, 30), (15, 40, 28), (15, 42, 29), (16, 40, 28), (15, 40, 28), (14, 46, 30),
    ];
    for (t, s, avg) in cells {
        assert_eq!(avg_percent(t as f64 / 100.0, s as f64 / 100.0), avg, "{t}/{s}");
    }
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = accuracy(&p, &g).unwrap();
        let b = balanced_accuracy(&p, &g, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&b));
        let s = TaskScores::from_predictions(Task::Type, &["a", "b", "c", "d"].map(String::from), &p, &g).unwrap();
        prop_assert_eq!(s.confusion.iter().flatten().sum::<usize>(), g.len());
        let trace: usize = (0..4).map(|c| s.confusion[c][c]).sum();
        prop_assert_eq!(s.accuracy, trace as f64 / g.len() as f64);
    }
}
