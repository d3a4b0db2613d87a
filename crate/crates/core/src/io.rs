//! Versioned JSONL / JSON file formats.
//!
//! Every line carries `"v": 1`; readers reject other versions. Floating
//! values in generated reports are rounded to 9 significant digits so output
//! files are byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::grammar::{parse_response, Answer, LabeledBox, ReferringTask, SubsetTag};
use crate::grpo::TrainLogRecord;
use crate::metrics::{EvalReport, PredictionRecord, Scores, SubsetScores};
use crate::reward::RewardBreakdown;

pub const SCHEMA_VERSION: u32 = 1;

/// Round to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn check_version(v: u32, line: usize) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Format(format!("line {line}: unsupported schema version {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLine {
    pub v: u32,
    #[serde(flatten)]
    pub task: ReferringTask,
}

/// Parse a tasks JSONL document. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_tasks(text: &str) -> Result<Vec<ReferringTask>> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let rec: TaskLine = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {n}: {e}")))?;
        check_version(rec.v, n)?;
        rec.task
            .validate()
            .map_err(|e| Error::Format(format!("line {n}: {e}")))?;
        tasks.push(rec.task);
    }
    Ok(tasks)
}

pub fn tasks_to_jsonl(tasks: &[ReferringTask]) -> String {
    let mut out = String::new();
    for t in tasks {
        let line = TaskLine {
            v: SCHEMA_VERSION,
            task: t.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("task serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawBox {
    pub label: String,
    #[serde(rename = "box")]
    pub coords: [f64; 4],
}

/// A prediction or response line: raw model text, explicit boxes, or both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub v: u32,
    #[serde(default)]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<RawBox>>,
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, n: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Format(format!("line {n}: {e}")))
}

fn record_from_line(rec: PredictionLine, n: usize) -> Result<PredictionRecord> {
    check_version(rec.v, n)?;
    let task_id = rec
        .task_id
        .ok_or_else(|| Error::Format(format!("line {n}: missing task_id")))?;
    let explicit = match rec.boxes {
        None => None,
        Some(raw_boxes) => {
            let mut boxes = Vec::new();
            let mut degenerate = 0;
            for b in raw_boxes {
                if b.coords.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Format(format!("line {n}: non-finite box coordinate")));
                }
                match BBox::from_array(b.coords) {
                    Ok(bb) => boxes.push(LabeledBox::new(b.label, bb)),
                    Err(_) => degenerate += 1,
                }
            }
            Some((boxes, degenerate))
        }
    };
    match (rec.raw_response, explicit) {
        (None, None) => Err(Error::Format(format!(
            "line {n}: prediction needs raw_response or boxes"
        ))),
        (None, Some((boxes, degenerate))) => Ok(PredictionRecord {
            task_id,
            raw_response: None,
            boxes,
            unusable: degenerate,
        }),
        (Some(raw), explicit) => {
            let record = PredictionRecord::from_raw(task_id, raw);
            if let Some((boxes, degenerate)) = explicit {
                if degenerate > 0 || record.unusable > 0 || boxes != record.boxes {
                    return Err(Error::Format(format!(
                        "line {n}: boxes disagree with the parsed raw_response"
                    )));
                }
            }
            Ok(record)
        }
    }
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionLine = parse_line(line, i + 1)?;
        out.push(record_from_line(rec, i + 1)?);
    }
    Ok(out)
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = PredictionLine {
            v: SCHEMA_VERSION,
            task_id: Some(r.task_id.clone()),
            raw_response: r.raw_response.clone(),
            boxes: r.raw_response.is_none().then(|| {
                r.boxes
                    .iter()
                    .map(|b| RawBox {
                        label: b.label.clone(),
                        coords: b.bbox.to_array(),
                    })
                    .collect()
            }),
        };
        out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

/// One response to score: `(task_id, raw_response)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub line: usize,
    pub task_id: Option<String>,
    pub raw_response: String,
}

pub fn parse_response_line(line: &str, n: usize) -> Result<ResponseRecord> {
    let rec: PredictionLine = parse_line(line, n)?;
    check_version(rec.v, n)?;
    let raw_response = rec
        .raw_response
        .ok_or_else(|| Error::Format(format!("line {n}: missing raw_response")))?;
    Ok(ResponseRecord {
        line: n,
        task_id: rec.task_id,
        raw_response,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLine {
    pub v: u32,
    pub line: usize,
    pub format_ok: bool,
    pub answer_kind: String,
    pub errors: Vec<String>,
}

/// Format report for one input line; malformed JSON is reported, not fatal.
pub fn validate_line(line: &str, n: usize) -> ValidationLine {
    match parse_response_line(line, n) {
        Err(e) => ValidationLine {
            v: SCHEMA_VERSION,
            line: n,
            format_ok: false,
            answer_kind: Answer::Unparseable.kind().into(),
            errors: vec![e.to_string()],
        },
        Ok(rec) => {
            let parsed = parse_response(&rec.raw_response);
            let mut errors = Vec::new();
            if !parsed.format_ok {
                errors.push("tag structure must be one <think> block followed by one <answer> block".into());
            }
            if parsed.answer == Answer::Unparseable {
                errors.push("answer is not a JSON box list or a rejection".into());
            }
            ValidationLine {
                v: SCHEMA_VERSION,
                line: n,
                format_ok: parsed.format_ok,
                answer_kind: parsed.answer.kind().into(),
                errors,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    pub v: u32,
    pub task_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fmt: f64,
    pub total: f64,
}

impl RewardLine {
    pub fn new(task_id: impl Into<String>, r: &RewardBreakdown) -> Self {
        Self {
            v: SCHEMA_VERSION,
            task_id: task_id.into(),
            precision: sig9(r.precision),
            recall: sig9(r.recall),
            f1: sig9(r.f1),
            fmt: sig9(r.fmt),
            total: sig9(r.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLine {
    pub v: u32,
    pub task_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub v: u32,
    pub per_subset: BTreeMap<SubsetTag, SubsetScores>,
    pub overall: Option<Scores>,
    pub rejection_score: Option<f64>,
    pub threshold_grid: Vec<f64>,
}

impl From<&EvalReport> for ReportFile {
    fn from(r: &EvalReport) -> Self {
        let scores = |s: &Scores| Scores {
            recall: sig9(s.recall),
            precision: sig9(s.precision),
            df1: sig9(s.df1),
        };
        Self {
            v: SCHEMA_VERSION,
            per_subset: r
                .per_subset
                .iter()
                .map(|(k, s)| {
                    (
                        *k,
                        SubsetScores {
                            recall: sig9(s.recall),
                            precision: sig9(s.precision),
                            df1: sig9(s.df1),
                            n_tasks: s.n_tasks,
                        },
                    )
                })
                .collect(),
            overall: r.overall.as_ref().map(scores),
            rejection_score: r.rejection_score.map(sig9),
            threshold_grid: r.threshold_grid.iter().copied().map(sig9).collect(),
        }
    }
}

pub fn report_to_json(r: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(&ReportFile::from(r)).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_report(text: &str) -> Result<ReportFile> {
    let r: ReportFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    check_version(r.v, 1)?;
    Ok(r)
}

/// `subset,recall,precision,df1,n_tasks` rows, then an `overall` row.
pub fn report_to_csv(r: &EvalReport) -> String {
    let mut out = String::from("subset,recall,precision,df1,n_tasks\n");
    for (tag, s) in &r.per_subset {
        out.push_str(&format!(
            "{tag},{},{},{},{}\n",
            sig9(s.recall),
            sig9(s.precision),
            sig9(s.df1),
            s.n_tasks
        ));
    }
    if let Some(o) = &r.overall {
        let n: usize = r
            .per_subset
            .iter()
            .filter(|(t, _)| **t != SubsetTag::Rejection)
            .map(|(_, s)| s.n_tasks)
            .sum();
        out.push_str(&format!(
            "overall,{},{},{},{n}\n",
            sig9(o.recall),
            sig9(o.precision),
            sig9(o.df1)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub v: u32,
    pub iter: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

pub fn train_log_to_jsonl(log: &[TrainLogRecord]) -> String {
    let mut out = String::new();
    for r in log {
        let line = TrainLogLine {
            v: SCHEMA_VERSION,
            iter: r.iter,
            mean_reward: sig9(r.mean_reward),
            objective: sig9(r.objective),
            mean_kl: sig9(r.mean_kl),
            clip_fraction: sig9(r.clip_fraction),
        };
        out.push_str(&serde_json::to_string(&line).expect("log serializes"));
        out.push('\n');
    }
    out
}

pub fn read_text(path: &Path) -> std::io::Result<String> {
    std::fs::read_to_string(path)
}
