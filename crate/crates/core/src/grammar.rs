//! The tagged reasoning/answer output format.
//!
//! A response is a `<think>` block followed by an `<answer>` block:
//!
//! ```text
//! <think>
//! Plan:
//! 1. Check each person for the color red
//! Action:
//! - person 1: match. wears a red shirt
//! - person 2: no-match. wears blue
//! Summary: person 1 is red
//! </think>
//! <answer>[{"person 1": [10, 20, 110, 220]}]</answer>
//! ```
//!
//! Tag structure is checked strictly ([`validate_format`]) since it drives the
//! format reward. The think block is parsed leniently into a [`ThinkTrace`];
//! the answer block is parsed strictly into an [`Answer`].

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Instruction text placed between the image token and the box hints.
pub const DEFAULT_SYSTEM_PREAMBLE: &str = "A conversation between User and Assistant. The user asks a question, \
and the Assistant solves it. The assistant first thinks about the reasoning process in the mind and then \
provides the user with the answer. The reasoning process and answer are enclosed within <think> </think> and \
<answer> </answer> tags, respectively, i.e., <think> reasoning process here </think> <answer> answer here </answer>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetTag {
    Attribute,
    Position,
    Interaction,
    Reasoning,
    Celebrity,
    Rejection,
    Synthetic,
}

impl SubsetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetTag::Attribute => "attribute",
            SubsetTag::Position => "position",
            SubsetTag::Interaction => "interaction",
            SubsetTag::Reasoning => "reasoning",
            SubsetTag::Celebrity => "celebrity",
            SubsetTag::Rejection => "rejection",
            SubsetTag::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for SubsetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A candidate box given to the model, labeled "<category> <ordinal>".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHint {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl BoxHint {
    pub fn new(label: impl Into<String>, bbox: BBox) -> Self {
        Self {
            label: label.into(),
            bbox,
        }
    }
}

/// Trailing integer of a label ("person 12" -> 12).
pub fn label_ordinal(label: &str) -> Option<usize> {
    let trimmed = label.trim_end();
    let digits = trimmed.len() - trimmed.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    trimmed[trimmed.len() - digits..].parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringTask {
    pub task_id: String,
    pub image_ref: String,
    pub subset: SubsetTag,
    pub category: String,
    pub expression: String,
    pub hints: Vec<BoxHint>,
    /// 1-based hint ordinals of the referred objects; empty for rejection.
    pub gt: Vec<usize>,
}

impl ReferringTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTask {
            task_id: self.task_id.clone(),
            reason,
        };
        if self.task_id.is_empty() {
            return Err(bad("empty task id".into()));
        }
        let mut labels = HashSet::new();
        for (i, hint) in self.hints.iter().enumerate() {
            let label = hint.label.as_str();
            if label.trim().is_empty() {
                return Err(bad(format!("hint {} has an empty label", i + 1)));
            }
            if label.contains([':', '\n', '\r']) || label.trim() != label || contains_tag(label) {
                return Err(bad(format!("hint label {label:?} is not allowed")));
            }
            if label_ordinal(label) != Some(i + 1) {
                return Err(bad(format!("hint label {label:?} must end with ordinal {}", i + 1)));
            }
            if !labels.insert(label) {
                return Err(bad(format!("duplicate hint label {label:?}")));
            }
        }
        let mut seen = HashSet::new();
        for &o in &self.gt {
            if o == 0 || o > self.hints.len() {
                return Err(bad(format!(
                    "ground-truth ordinal {o} out of range 1..={}",
                    self.hints.len()
                )));
            }
            if !seen.insert(o) {
                return Err(bad(format!("duplicate ground-truth ordinal {o}")));
            }
        }
        if self.subset == SubsetTag::Rejection && !self.gt.is_empty() {
            return Err(bad("rejection task must have an empty ground truth".into()));
        }
        Ok(())
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|&o| self.hints[o - 1].bbox).collect()
    }

    pub fn is_rejection(&self) -> bool {
        self.gt.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Match,
    NoMatch,
    Partial,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Match => "match",
            Verdict::NoMatch => "no-match",
            Verdict::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub ordinal: usize,
    pub verdict: Verdict,
    pub rationale: String,
}

/// Planning / per-candidate action / summary structure of a think block.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkTrace {
    pub plan: Vec<String>,
    pub actions: Vec<Action>,
    pub summary: String,
}

impl ThinkTrace {
    pub fn is_structured(&self) -> bool {
        !self.plan.is_empty()
    }

    /// Check every action ordinal against the task's hints.
    pub fn validate_against(&self, task: &ReferringTask) -> Result<()> {
        for a in &self.actions {
            if a.ordinal == 0 || a.ordinal > task.hints.len() {
                return Err(Error::Serialize(format!(
                    "action references hint {} but task {} has {} hints",
                    a.ordinal,
                    task.task_id,
                    task.hints.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl LabeledBox {
    pub fn new(label: impl Into<String>, bbox: BBox) -> Self {
        Self {
            label: label.into(),
            bbox,
        }
    }
}

impl From<&BoxHint> for LabeledBox {
    fn from(h: &BoxHint) -> Self {
        Self::new(h.label.clone(), h.bbox)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Boxes(Vec<LabeledBox>),
    Rejection,
    Unparseable,
}

impl Answer {
    pub fn kind(&self) -> &'static str {
        match self {
            Answer::Boxes(_) => "boxes",
            Answer::Rejection => "rejection",
            Answer::Unparseable => "unparseable",
        }
    }

    /// Predicted boxes; empty for rejection and unparseable answers.
    pub fn boxes(&self) -> Vec<BBox> {
        match self {
            Answer::Boxes(b) => b.iter().map(|lb| lb.bbox).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoTResponse {
    pub raw: String,
    pub format_ok: bool,
    /// `None` when there is no closed think block at all.
    pub trace: Option<ThinkTrace>,
    pub answer: Answer,
}

fn contains_tag(s: &str) -> bool {
    TAGS.iter().any(|t| s.contains(t))
}

/// True iff `raw` is exactly one think block followed by exactly one answer
/// block, with nothing but whitespace around and between them.
pub fn validate_format(raw: &str) -> bool {
    let mut positions = [0usize; 4];
    for (slot, tag) in positions.iter_mut().zip(TAGS) {
        let mut found = raw.match_indices(tag);
        match (found.next(), found.next()) {
            (Some((i, _)), None) => *slot = i,
            _ => return false,
        }
    }
    let [think_open, think_close, answer_open, answer_close] = positions;
    if !(think_open < think_close && think_close < answer_open && answer_open < answer_close) {
        return false;
    }
    raw[..think_open].trim().is_empty()
        && raw[think_close + THINK_CLOSE.len()..answer_open].trim().is_empty()
        && raw[answer_close + ANSWER_CLOSE.len()..].trim().is_empty()
}

fn block<'a>(raw: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = raw.find(open)? + open.len();
    let len = raw[start..].find(close)?;
    Some(&raw[start..start + len])
}

fn strip_fence(s: &str) -> &str {
    let s = s.trim();
    let Some(rest) = s.strip_prefix("```") else {
        return s;
    };
    let Some(rest) = rest.trim_end().strip_suffix("```") else {
        return s;
    };
    // Drop an info string such as "json" on the opening line.
    match rest.find('\n') {
        Some(nl) if !rest[..nl].trim_start().starts_with(['[', '{', '"']) => rest[nl + 1..].trim(),
        _ => rest.trim(),
    }
}

fn is_rejection_phrase(s: &str) -> bool {
    let s = s
        .trim()
        .trim_matches('"')
        .trim()
        .trim_end_matches('.')
        .to_ascii_lowercase();
    s == "no match" || s == "none"
}

fn json_box(v: &Value) -> Option<BBox> {
    let items = v.as_array()?;
    if items.len() != 4 {
        return None;
    }
    let mut c = [0.0; 4];
    for (slot, item) in c.iter_mut().zip(items) {
        *slot = item.as_f64()?;
    }
    BBox::from_array(c).ok()
}

/// Parse the text between the answer tags.
///
/// Accepts a JSON array of single-key objects `{label: [x0, y0, x1, y1]}` or
/// of bare 4-number lists (labeled "object k"), optionally inside a fenced
/// code block. `[]`, "no match" and "none" mean rejection. Any malformed
/// element makes the whole answer unparseable.
pub fn parse_answer(text: &str) -> Answer {
    let body = strip_fence(text);
    if is_rejection_phrase(body) {
        return Answer::Rejection;
    }
    let Ok(Value::Array(items)) = serde_json::from_str::<Value>(body) else {
        return Answer::Unparseable;
    };
    if items.is_empty() {
        return Answer::Rejection;
    }
    let mut boxes = Vec::with_capacity(items.len());
    for (k, item) in items.iter().enumerate() {
        let parsed = match item {
            Value::Object(map) if map.len() == 1 => {
                let (label, coords) = map.iter().next().expect("one entry");
                json_box(coords).map(|b| LabeledBox::new(label.clone(), b))
            }
            Value::Array(_) => json_box(item).map(|b| LabeledBox::new(format!("object {}", k + 1), b)),
            _ => None,
        };
        match parsed {
            Some(lb) => boxes.push(lb),
            None => return Answer::Unparseable,
        }
    }
    Answer::Boxes(boxes)
}

fn action_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^(?:[-*•]\s*)?(?P<label>[^:]*?(?P<ord>\d+))\s*:\s*(?P<verdict>no-match|no match|not a match|matches|match|partial|✓|✗)(?:\b|\s|$)\.?\s*(?P<rest>.*)$",
        )
        .expect("valid regex")
    })
}

fn plan_step_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\d+[.)]|[-*•])\s*(?P<step>.*)$").expect("valid regex"))
}

fn parse_verdict(s: &str) -> Verdict {
    match s.to_lowercase().as_str() {
        "no-match" | "no match" | "not a match" | "✗" => Verdict::NoMatch,
        "partial" => Verdict::Partial,
        _ => Verdict::Match,
    }
}

fn parse_action(line: &str) -> Option<Action> {
    let caps = action_regex().captures(line)?;
    Some(Action {
        ordinal: caps["ord"].parse().ok()?,
        verdict: parse_verdict(&caps["verdict"]),
        rationale: caps["rest"].trim().to_string(),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Plan,
    Action,
    Summary,
}

fn header<'a>(line: &'a str, names: &[&str]) -> Option<&'a str> {
    let (head, rest) = line.split_once(':')?;
    let head = head.trim().trim_matches(['*', '#', ' ']).to_ascii_lowercase();
    names.contains(&head.as_str()).then(|| rest.trim())
}

/// Lenient think-block parser. Never fails; text without recognizable
/// sections yields an unstructured trace (empty plan).
pub fn parse_trace(think: &str) -> ThinkTrace {
    let mut trace = ThinkTrace::default();
    let mut section = Section::None;
    let mut summary_lines: Vec<&str> = Vec::new();
    for line in think.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = header(line, &["plan", "planning"]) {
            section = Section::Plan;
            if !rest.is_empty() {
                trace.plan.push(rest.to_string());
            }
            continue;
        }
        if let Some(rest) = header(line, &["action", "actions"]) {
            section = Section::Action;
            if let Some(a) = parse_action(rest) {
                trace.actions.push(a);
            }
            continue;
        }
        if let Some(rest) = header(line, &["summary", "summarization"]) {
            section = Section::Summary;
            if !rest.is_empty() {
                summary_lines.push(rest);
            }
            continue;
        }
        match section {
            Section::Plan => match plan_step_regex().captures(line) {
                Some(c) => trace.plan.push(c["step"].trim().to_string()),
                None => trace.plan.push(line.to_string()),
            },
            Section::Summary => summary_lines.push(line),
            Section::Action | Section::None => {
                if let Some(a) = parse_action(line) {
                    trace.actions.push(a);
                }
            }
        }
    }
    trace.summary = summary_lines.join("\n");
    trace
}

pub fn parse_response(raw: &str) -> CoTResponse {
    let format_ok = validate_format(raw);
    let trace = block(raw, THINK_OPEN, THINK_CLOSE).map(parse_trace);
    let answer = block(raw, ANSWER_OPEN, ANSWER_CLOSE)
        .map(parse_answer)
        .unwrap_or(Answer::Unparseable);
    CoTResponse {
        raw: raw.to_string(),
        format_ok,
        trace,
        answer,
    }
}

/// JSON number text; integral values are written without a fraction.
pub fn format_coord(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn box_json(label: &str, b: &BBox) -> String {
    let c = b.to_array().map(format_coord);
    let key = serde_json::to_string(label).expect("string serializes");
    format!("{{{key}: [{}, {}, {}, {}]}}", c[0], c[1], c[2], c[3])
}

/// Canonical answer text: `[]` for rejection, otherwise a JSON array of
/// single-key objects.
pub fn format_answer(boxes: &[LabeledBox]) -> String {
    let parts: Vec<String> = boxes.iter().map(|lb| box_json(&lb.label, &lb.bbox)).collect();
    format!("[{}]", parts.join(", "))
}

fn check_line(field: &str, s: &str, allow_empty: bool) -> Result<()> {
    if !allow_empty && s.is_empty() {
        return Err(Error::Serialize(format!("{field} is empty")));
    }
    if s.contains(['\n', '\r']) || s.trim() != s || contains_tag(s) {
        return Err(Error::Serialize(format!(
            "{field} {s:?} must be a single trimmed line without tags"
        )));
    }
    Ok(())
}

/// Emit the canonical response text for a trace and answer.
///
/// With a task context, action lines use the task's hint labels and every
/// action ordinal must be in range; without one they read "hint k".
pub fn serialize_response(trace: &ThinkTrace, answer: &Answer, task: Option<&ReferringTask>) -> Result<String> {
    if let Some(task) = task {
        trace.validate_against(task)?;
    }
    for step in &trace.plan {
        check_line("plan step", step, false)?;
    }
    check_line("summary", &trace.summary, true)?;

    let mut out = String::new();
    out.push_str(THINK_OPEN);
    out.push_str("\nPlan:\n");
    for (i, step) in trace.plan.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, step));
    }
    out.push_str("Action:\n");
    for a in &trace.actions {
        if a.ordinal == 0 {
            return Err(Error::Serialize("action ordinal must be >= 1".into()));
        }
        check_line("rationale", &a.rationale, true)?;
        let label = match task {
            Some(t) => t.hints[a.ordinal - 1].label.clone(),
            None => format!("hint {}", a.ordinal),
        };
        out.push_str(&format!("- {label}: {}.", a.verdict.as_str()));
        if !a.rationale.is_empty() {
            out.push(' ');
            out.push_str(&a.rationale);
        }
        out.push('\n');
    }
    if trace.summary.is_empty() {
        out.push_str("Summary:\n");
    } else {
        out.push_str(&format!("Summary: {}\n", trace.summary));
    }
    out.push_str(THINK_CLOSE);
    out.push('\n');

    let answer_text = match answer {
        Answer::Rejection => "[]".to_string(),
        Answer::Boxes(b) if b.is_empty() => {
            return Err(Error::Serialize("an empty box list is written as a rejection".into()))
        }
        Answer::Boxes(b) => {
            for lb in b {
                check_line("answer label", &lb.label, false)?;
            }
            format_answer(b)
        }
        Answer::Unparseable => return Err(Error::Serialize("cannot emit an unparseable answer".into())),
    };
    out.push_str(ANSWER_OPEN);
    out.push_str(&answer_text);
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

/// Hints as comma-separated single-key JSON objects, in hint order.
pub fn format_hints(hints: &[BoxHint]) -> String {
    hints
        .iter()
        .map(|h| box_json(&h.label, &h.bbox))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn render_prompt(task: &ReferringTask, preamble: &str) -> Result<String> {
    if task.expression.trim().is_empty() {
        return Err(Error::InvalidTask {
            task_id: task.task_id.clone(),
            reason: "empty referring expression".into(),
        });
    }
    Ok(format!(
        "<image>. {preamble} Hint: Object and its coordinates in this image: {}. User: Locate {}. Assistant:",
        format_hints(&task.hints),
        task.expression
    ))
}
