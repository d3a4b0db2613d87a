//! Benchmark evaluation: recall, precision and DF1 averaged over an IoU
//! threshold grid, plus the rejection score.
//!
//! Each task is scored on its own (macro average over thresholds), tasks are
//! averaged within a subset, and the overall row is the unweighted mean of
//! the non-rejection subsets.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{greedy_match, BBox};
use crate::grammar::{parse_response, Answer, LabeledBox, ReferringTask, SubsetTag};
use crate::reward::PrecisionRecall;

/// 0.50, 0.55, ..., 0.95.
pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    if grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must lie in (0, 1]: {grid:?}"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "threshold grid must be strictly ascending: {grid:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn counts_at_threshold(preds: &[BBox], gts: &[BBox], threshold: f64) -> Counts {
    let m = greedy_match(preds, gts, threshold);
    Counts {
        tp: m.pairs.len(),
        fp: m.unmatched_preds.len(),
        fn_: m.unmatched_gts.len(),
    }
}

/// Per-threshold F1 used for the DF1 column.
///
/// The default is plain F1. A density-weighted variant can be plugged in
/// through [`evaluate_with`].
pub trait Df1Score: Sync {
    fn df1(&self, counts: Counts) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PlainF1;

impl Df1Score for PlainF1 {
    fn df1(&self, c: Counts) -> f64 {
        PrecisionRecall::from_counts(c.tp, c.tp + c.fp, c.tp + c.fn_).f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub recall: f64,
    pub precision: f64,
    pub df1: f64,
}

pub fn task_metrics(preds: &[BBox], gts: &[BBox], grid: &[f64]) -> Scores {
    task_metrics_with(preds, 0, gts, grid, &PlainF1)
}

/// `invalid_preds` counts outputs that could not be scored as boxes; they
/// never match and count as false positives.
fn task_metrics_with(
    preds: &[BBox],
    invalid_preds: usize,
    gts: &[BBox],
    grid: &[f64],
    scorer: &dyn Df1Score,
) -> Scores {
    let mut sum = Scores {
        recall: 0.0,
        precision: 0.0,
        df1: 0.0,
    };
    for &t in grid {
        let mut c = counts_at_threshold(preds, gts, t);
        c.fp += invalid_preds;
        let pr = PrecisionRecall::from_counts(c.tp, c.tp + c.fp, c.tp + c.fn_);
        sum.recall += pr.recall;
        sum.precision += pr.precision;
        sum.df1 += scorer.df1(c);
    }
    let n = grid.len() as f64;
    Scores {
        recall: sum.recall / n,
        precision: sum.precision / n,
        df1: sum.df1 / n,
    }
}

/// One model output for one task, either as raw text or as explicit boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub task_id: String,
    pub raw_response: Option<String>,
    pub boxes: Vec<LabeledBox>,
    /// Outputs that are not usable boxes: each supplied box with zero or
    /// negative area, or one for an unparseable raw answer.
    pub unusable: usize,
}

impl PredictionRecord {
    pub fn from_boxes(task_id: impl Into<String>, boxes: Vec<LabeledBox>) -> Self {
        Self {
            task_id: task_id.into(),
            raw_response: None,
            boxes,
            unusable: 0,
        }
    }

    /// Boxes are taken from the parsed answer. An unparseable answer is not
    /// an abstention.
    pub fn from_raw(task_id: impl Into<String>, raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let (boxes, unusable) = match parse_response(&raw).answer {
            Answer::Boxes(b) => (b, 0),
            Answer::Rejection => (Vec::new(), 0),
            Answer::Unparseable => (Vec::new(), 1),
        };
        Self {
            task_id: task_id.into(),
            raw_response: Some(raw),
            boxes,
            unusable,
        }
    }

    pub fn pred_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }

    /// True when the record outputs no box at all.
    pub fn abstains(&self) -> bool {
        self.boxes.is_empty() && self.unusable == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetScores {
    pub recall: f64,
    pub precision: f64,
    pub df1: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subset: BTreeMap<SubsetTag, SubsetScores>,
    /// Mean over non-rejection subsets; `None` when there are none.
    pub overall: Option<Scores>,
    /// `None` when there are no rejection tasks.
    pub rejection_score: Option<f64>,
    pub threshold_grid: Vec<f64>,
}

pub fn rejection_score(tasks: &[ReferringTask], preds: &[PredictionRecord]) -> Result<Option<f64>> {
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.task_id.as_str(), p)).collect();
    let mut n = 0usize;
    let mut empty = 0usize;
    for task in tasks.iter().filter(|t| t.subset == SubsetTag::Rejection) {
        let record = by_id
            .get(task.task_id.as_str())
            .ok_or_else(|| Error::Evaluation(format!("missing prediction for rejection task {}", task.task_id)))?;
        n += 1;
        if record.abstains() {
            empty += 1;
        }
    }
    Ok((n > 0).then(|| empty as f64 / n as f64))
}

pub fn evaluate(tasks: &[ReferringTask], preds: &[PredictionRecord], grid: &[f64]) -> Result<EvalReport> {
    evaluate_with(tasks, preds, grid, &PlainF1)
}

fn offenders(ids: impl IntoIterator<Item = String>) -> String {
    let mut v: Vec<String> = ids.into_iter().collect();
    v.sort();
    v.dedup();
    v.join(", ")
}

pub fn evaluate_with(
    tasks: &[ReferringTask],
    preds: &[PredictionRecord],
    grid: &[f64],
    scorer: &dyn Df1Score,
) -> Result<EvalReport> {
    validate_grid(grid)?;

    let mut seen = HashSet::new();
    let dup_tasks: Vec<String> = tasks
        .iter()
        .filter(|t| !seen.insert(t.task_id.as_str()))
        .map(|t| t.task_id.clone())
        .collect();
    if !dup_tasks.is_empty() {
        return Err(Error::Evaluation(format!(
            "duplicate task ids: {}",
            offenders(dup_tasks)
        )));
    }

    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    let mut dup_preds = Vec::new();
    for p in preds {
        if by_id.insert(p.task_id.as_str(), p).is_some() {
            dup_preds.push(p.task_id.clone());
        }
    }
    if !dup_preds.is_empty() {
        return Err(Error::Evaluation(format!(
            "duplicate prediction records: {}",
            offenders(dup_preds)
        )));
    }
    let unknown: Vec<String> = preds
        .iter()
        .filter(|p| !seen.contains(p.task_id.as_str()))
        .map(|p| p.task_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Evaluation(format!(
            "predictions for unknown tasks: {}",
            offenders(unknown)
        )));
    }
    let missing: Vec<String> = tasks
        .iter()
        .filter(|t| !by_id.contains_key(t.task_id.as_str()))
        .map(|t| t.task_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing predictions for tasks: {}",
            offenders(missing)
        )));
    }

    // Sum in task-id order so the report does not depend on input order.
    let mut ordered: Vec<&ReferringTask> = tasks.iter().collect();
    ordered.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let mut sums: BTreeMap<SubsetTag, (Scores, usize)> = BTreeMap::new();
    for task in ordered {
        let record = by_id[task.task_id.as_str()];
        let s = task_metrics_with(&record.pred_boxes(), record.unusable, &task.gt_boxes(), grid, scorer);
        let entry = sums.entry(task.subset).or_insert((
            Scores {
                recall: 0.0,
                precision: 0.0,
                df1: 0.0,
            },
            0,
        ));
        entry.0.recall += s.recall;
        entry.0.precision += s.precision;
        entry.0.df1 += s.df1;
        entry.1 += 1;
    }

    let per_subset: BTreeMap<SubsetTag, SubsetScores> = sums
        .into_iter()
        .map(|(tag, (s, n))| {
            let k = n as f64;
            (
                tag,
                SubsetScores {
                    recall: s.recall / k,
                    precision: s.precision / k,
                    df1: s.df1 / k,
                    n_tasks: n,
                },
            )
        })
        .collect();

    let answered: Vec<&SubsetScores> = per_subset
        .iter()
        .filter(|(tag, _)| **tag != SubsetTag::Rejection)
        .map(|(_, s)| s)
        .collect();
    let overall = (!answered.is_empty()).then(|| {
        let k = answered.len() as f64;
        Scores {
            recall: answered.iter().map(|s| s.recall).sum::<f64>() / k,
            precision: answered.iter().map(|s| s.precision).sum::<f64>() / k,
            df1: answered.iter().map(|s| s.df1).sum::<f64>() / k,
        }
    });

    Ok(EvalReport {
        per_subset,
        overall,
        rejection_score: rejection_score(tasks, preds)?,
        threshold_grid: grid.to_vec(),
    })
}
