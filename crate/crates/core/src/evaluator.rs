//! Accuracy, balanced accuracy and the model × condition report grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Task;
use crate::fsutil;
use crate::trainer::{EncoderBackend, MultiTaskModel};
use crate::variants::{Condition, DatasetVariant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no examples to score")]
    EmptyInput,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("no results to report")]
    NoResults,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn check(preds: &[usize], golds: &[usize]) -> Result<(), EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if golds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64, EvalError> {
    check(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// `confusion[gold][pred]`
pub fn confusion_matrix(preds: &[usize], golds: &[usize], classes: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    check(preds, golds)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= classes || g >= classes {
            return Err(EvalError::VocabMismatch(format!("class index {} outside {classes} classes", p.max(g))));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Mean per-class recall over the classes that occur in `golds`.
pub fn balanced_accuracy(preds: &[usize], golds: &[usize], classes: usize) -> Result<f64, EvalError> {
    Ok(balanced_from_confusion(&confusion_matrix(preds, golds, classes)?))
}

fn balanced_from_confusion(m: &[Vec<usize>]) -> f64 {
    let mut sum = 0.0;
    let mut present = 0usize;
    for (c, row) in m.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            sum += row[c] as f64 / total as f64;
            present += 1;
        }
    }
    sum / present as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub task: Task,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub n: usize,
    pub labels: Vec<String>,
    /// Rows are gold classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

impl TaskScores {
    pub fn from_predictions(task: Task, labels: &[String], preds: &[usize], golds: &[usize]) -> Result<Self, EvalError> {
        let confusion = confusion_matrix(preds, golds, labels.len())?;
        let trace: usize = (0..labels.len()).map(|c| confusion[c][c]).sum();
        Ok(Self {
            task,
            accuracy: trace as f64 / golds.len() as f64,
            balanced_accuracy: balanced_from_confusion(&confusion),
            n: golds.len(),
            labels: labels.to_vec(),
            confusion,
        })
    }
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub record_id: String,
    pub task: Task,
    pub pred: String,
    pub gold: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: BTreeMap<Task, TaskScores>,
    pub predictions: Vec<PredictionRecord>,
}

pub fn evaluate<E: EncoderBackend>(
    model: &MultiTaskModel<E>,
    dataset: &DatasetVariant,
    tasks: &[Task],
) -> Result<Evaluation, EvalError> {
    if dataset.examples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut golds: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    for &task in tasks {
        let labels = model
            .labels
            .get(&task)
            .filter(|_| model.heads.contains_key(&task))
            .ok_or_else(|| EvalError::VocabMismatch(format!("model has no head for `{task}`")))?;
        let g = dataset
            .examples
            .iter()
            .map(|ex| {
                let label = ex.labels.get(task).unwrap_or_default();
                labels.iter().position(|l| l == label).ok_or_else(|| {
                    EvalError::VocabMismatch(format!("record `{}`: label `{label}` not in `{task}` head", ex.record_id))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        golds.insert(task, g);
    }
    let mut preds: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    let mut dump = Vec::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        let p = model.predict(&[&ex.input_text]).remove(0);
        for &task in tasks {
            let idx = p.labels[&task];
            preds.entry(task).or_default().push(idx);
            let labels = &model.labels[&task];
            dump.push(PredictionRecord {
                record_id: ex.record_id.clone(),
                task,
                pred: labels[idx].clone(),
                gold: labels[golds[&task][i]].clone(),
            });
        }
    }
    let scores = tasks
        .iter()
        .map(|&t| Ok((t, TaskScores::from_predictions(t, &model.labels[&t], &preds[&t], &golds[&t])?)))
        .collect::<Result<_, EvalError>>()?;
    Ok(Evaluation { scores, predictions: dump })
}

pub fn predictions_jsonl(records: &[PredictionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("prediction serializes");
        out.push(b'\n');
    }
    out
}

/// Whole percent, halves rounded up. The small epsilon absorbs binary
/// representation error in values like 0.595.
pub fn percent_half_up(x: f64) -> u32 {
    (x * 100.0 + 0.5 + 1e-9).floor() as u32
}

pub fn avg_percent(type_acc: f64, severity_acc: f64) -> u32 {
    percent_half_up((type_acc + severity_acc) / 2.0)
}

/// Scores for one (model, condition, arm) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub condition: Condition,
    pub fine_tuned: bool,
    pub scores: BTreeMap<Task, TaskScores>,
}

impl CellResult {
    /// A cell from bare accuracies, e.g. reference numbers.
    pub fn from_accuracies(model: &str, condition: Condition, fine_tuned: bool, type_acc: f64, severity_acc: f64) -> Self {
        let bare = |task, accuracy| TaskScores {
            task,
            accuracy,
            balanced_accuracy: f64::NAN,
            n: 0,
            labels: Vec::new(),
            confusion: Vec::new(),
        };
        let scores = BTreeMap::from([(Task::Type, bare(Task::Type, type_acc)), (Task::Severity, bare(Task::Severity, severity_acc))]);
        Self { model: model.to_string(), condition, fine_tuned, scores }
    }

    fn acc(&self, task: Task) -> Option<f64> {
        self.scores.get(&task).map(|s| s.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmCells {
    pub type_percent: Option<u32>,
    pub severity_percent: Option<u32>,
    pub avg_percent: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub condition: Condition,
    pub fine_tuned: Option<ArmCells>,
    pub without_fine_tuning: Option<ArmCells>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellResult>,
}

const REPORT_NOTE: &str = "Grid cells are plain accuracy in whole percent (halves round up); \
AVG is the mean of Type and Severity accuracy. Balanced accuracy and confusion matrices are in `cells`.";

fn arm(cell: &CellResult) -> ArmCells {
    let t = cell.acc(Task::Type);
    let s = cell.acc(Task::Severity);
    ArmCells {
        type_percent: t.map(percent_half_up),
        severity_percent: s.map(percent_half_up),
        avg_percent: t.zip(s).map(|(t, s)| avg_percent(t, s)),
    }
}

/// Group cells into rows keyed by (model, condition). A later cell for the
/// same key replaces an earlier one.
pub fn build_report(results: &[CellResult]) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    let mut by_key: BTreeMap<(Condition, String, bool), &CellResult> = BTreeMap::new();
    for c in results {
        by_key.insert((c.condition, c.model.clone(), c.fine_tuned), c);
    }
    let mut rows: BTreeMap<(Condition, String), ReportRow> = BTreeMap::new();
    for ((cond, model, ft), cell) in &by_key {
        let row = rows.entry((*cond, model.clone())).or_insert_with(|| ReportRow {
            model: model.clone(),
            condition: *cond,
            fine_tuned: None,
            without_fine_tuning: None,
        });
        if *ft {
            row.fine_tuned = Some(arm(cell));
        } else {
            row.without_fine_tuning = Some(arm(cell));
        }
    }
    Ok(EvalReport {
        note: REPORT_NOTE.to_string(),
        rows: rows.into_values().collect(),
        cells: by_key.into_values().cloned().collect(),
    })
}

fn fmt_pct(p: Option<u32>) -> String {
    p.map_or_else(|| "-".to_string(), |v| format!("{v}%"))
}

fn fmt_arm(a: &Option<ArmCells>) -> String {
    match a {
        Some(a) => format!("{} | {} | {}", fmt_pct(a.type_percent), fmt_pct(a.severity_percent), fmt_pct(a.avg_percent)),
        None => "- | - | -".to_string(),
    }
}

impl EvalReport {
    /// One table per augmented condition, each preceded by the Normal Text
    /// rows. With no augmented condition, a single Normal Text table.
    pub fn to_markdown(&self) -> String {
        let normal: Vec<&ReportRow> = self.rows.iter().filter(|r| r.condition == Condition::Normal).collect();
        let mut augmented: Vec<Condition> = Vec::new();
        for c in [Condition::Refined, Condition::Ner, Condition::Summarized] {
            if self.rows.iter().any(|r| r.condition == c) {
                augmented.push(c);
            }
        }
        let mut out = String::from("# Evaluation report\n\n");
        writeln!(out, "{}\n", self.note).unwrap();
        let groups: Vec<Option<Condition>> =
            if augmented.is_empty() { vec![None] } else { augmented.into_iter().map(Some).collect() };
        for group in groups {
            let title = group.map_or("Normal Text", |c| c.display_name());
            writeln!(out, "## {title}\n").unwrap();
            out.push_str("| Condition | Model | Type (FT) | Severity (FT) | AVG (FT) | Type (W/O FT) | Severity (W/O FT) | AVG (W/O FT) |\n");
            out.push_str("|---|---|---|---|---|---|---|---|\n");
            let rows = normal.iter().copied().chain(self.rows.iter().filter(|r| Some(r.condition) == group));
            for r in rows {
                writeln!(
                    out,
                    "| {} | {} | {} | {} |",
                    r.condition.display_name(),
                    r.model,
                    fmt_arm(&r.fine_tuned),
                    fmt_arm(&r.without_fine_tuning)
                )
                .unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }
}

/// Write `report.json` and `report.md` into `dir`.
pub fn render_report(results: &[CellResult], dir: &Path) -> Result<EvalReport, EvalError> {
    let report = build_report(results)?;
    std::fs::create_dir_all(dir)?;
    fsutil::write_atomic(&dir.join("report.json"), &report.to_json())?;
    fsutil::write_atomic(&dir.join("report.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}
