//! C ABI over the groundref primitives.
//!
//! Conventions:
//! - Fallible calls return a [`GrStatus`]; on failure the message is
//!   available from [`gr_last_error_message`] on the same thread.
//! - Handles are opaque and must be released with their `_free` function.
//! - Strings returned as `char *` are owned by the caller and released with
//!   [`gr_string_free`].
//! - Strings passed in must be NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use groundref::geometry::{iou, BBox};
use groundref::grammar::{parse_response, validate_format, Answer, CoTResponse, ReferringTask};
use groundref::grpo::{importance_ratio, kl_term, normalize_advantages};
use groundref::io::{parse_predictions, parse_tasks, report_to_json};
use groundref::metrics::{default_grid, evaluate, PredictionRecord};
use groundref::reward::{reward_response, RewardConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Evaluation = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrAnswerKind {
    Boxes = 0,
    Rejection = 1,
    Unparseable = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrRewardBreakdown {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fmt: f64,
    pub total: f64,
}

/// Parsed model response.
pub struct GrResponse {
    inner: CoTResponse,
}

/// Accumulates tasks and predictions, then produces an evaluation report.
pub struct GrEvaluator {
    tasks: Vec<ReferringTask>,
    preds: Vec<PredictionRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: GrStatus, msg: impl Into<String>) -> GrStatus {
    set_error(msg);
    status
}

/// Run `f`, turning panics into `GrStatus::Panic`.
fn guard(f: impl FnOnce() -> GrStatus) -> GrStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(GrStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, GrStatus> {
    if p.is_null() {
        return Err(fail(GrStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn box_arg(p: *const f64, name: &str) -> Result<BBox, GrStatus> {
    if p.is_null() {
        return Err(fail(GrStatus::NullPointer, format!("{name} is null")));
    }
    let c = std::slice::from_raw_parts(p, 4);
    BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| fail(GrStatus::InvalidArgument, format!("{name}: {e}")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn gr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// IoU of two `[x0, y0, x1, y1]` boxes.
///
/// # Safety
/// `a` and `b` must point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_iou(a: *const f64, b: *const f64, out: *mut f64) -> GrStatus {
    guard(|| {
        if out.is_null() {
            return fail(GrStatus::NullPointer, "out is null");
        }
        let a = tri!(box_arg(a, "a"));
        let b = tri!(box_arg(b, "b"));
        *out = iou(&a, &b);
        GrStatus::Ok
    })
}

/// # Safety
/// `raw` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gr_validate_format(raw: *const c_char, out: *mut bool) -> GrStatus {
    guard(|| {
        if out.is_null() {
            return fail(GrStatus::NullPointer, "out is null");
        }
        let raw = tri!(str_arg(raw, "raw"));
        *out = validate_format(raw);
        GrStatus::Ok
    })
}

/// Parse a response. Never fails on content; returns NULL only on bad input
/// pointers or encoding.
///
/// # Safety
/// `raw` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gr_response_parse(raw: *const c_char) -> *mut GrResponse {
    let mut handle = ptr::null_mut();
    guard(|| {
        let raw = tri!(str_arg(raw, "raw"));
        handle = Box::into_raw(Box::new(GrResponse {
            inner: parse_response(raw),
        }));
        GrStatus::Ok
    });
    handle
}

/// # Safety
/// `r` must be NULL or a handle from `gr_response_parse`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn gr_response_free(r: *mut GrResponse) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a live response handle.
#[no_mangle]
pub unsafe extern "C" fn gr_response_format_ok(r: *const GrResponse) -> bool {
    r.as_ref().is_some_and(|r| r.inner.format_ok)
}

/// # Safety
/// `r` must be a live response handle.
#[no_mangle]
pub unsafe extern "C" fn gr_response_answer_kind(r: *const GrResponse) -> GrAnswerKind {
    match r.as_ref().map(|r| &r.inner.answer) {
        Some(Answer::Boxes(_)) => GrAnswerKind::Boxes,
        Some(Answer::Rejection) => GrAnswerKind::Rejection,
        _ => GrAnswerKind::Unparseable,
    }
}

/// # Safety
/// `r` must be a live response handle.
#[no_mangle]
pub unsafe extern "C" fn gr_response_box_count(r: *const GrResponse) -> usize {
    match r.as_ref().map(|r| &r.inner.answer) {
        Some(Answer::Boxes(b)) => b.len(),
        _ => 0,
    }
}

/// Copy box `index` of the answer into `out[0..4]`.
///
/// # Safety
/// `r` must be a live response handle; `out` must have room for 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn gr_response_box(r: *const GrResponse, index: usize, out: *mut f64) -> GrStatus {
    guard(|| {
        let Some(r) = r.as_ref() else {
            return fail(GrStatus::NullPointer, "response is null");
        };
        if out.is_null() {
            return fail(GrStatus::NullPointer, "out is null");
        }
        let boxes = r.inner.answer.boxes();
        let Some(b) = boxes.get(index) else {
            return fail(GrStatus::OutOfRange, format!("box {index} of {}", boxes.len()));
        };
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&b.to_array());
        GrStatus::Ok
    })
}

/// Score `raw` against a task given as one tasks-JSONL line.
///
/// # Safety
/// `task_json` and `raw` must be NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gr_reward_response(
    task_json: *const c_char,
    raw: *const c_char,
    lambda: f64,
    out: *mut GrRewardBreakdown,
) -> GrStatus {
    guard(|| {
        if out.is_null() {
            return fail(GrStatus::NullPointer, "out is null");
        }
        let task_json = tri!(str_arg(task_json, "task_json"));
        let raw = tri!(str_arg(raw, "raw"));
        let cfg = match RewardConfig::new(lambda, groundref::geometry::DEFAULT_MATCH_TOL) {
            Ok(c) => c,
            Err(e) => return fail(GrStatus::InvalidArgument, e.to_string()),
        };
        let task = match parse_tasks(task_json) {
            Ok(mut v) if v.len() == 1 => v.remove(0),
            Ok(v) => return fail(GrStatus::Parse, format!("expected one task, got {}", v.len())),
            Err(e) => return fail(GrStatus::Parse, e.to_string()),
        };
        let r = reward_response(&task, raw, &cfg);
        *out = GrRewardBreakdown {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fmt: r.fmt,
            total: r.total,
        };
        GrStatus::Ok
    })
}

/// Group-relative advantages of `n` rewards, written to `out[0..n]`.
///
/// # Safety
/// `rewards` must hold `n` doubles and `out` must have room for `n`.
#[no_mangle]
pub unsafe extern "C" fn gr_normalize_advantages(
    rewards: *const f64,
    n: usize,
    std_floor: f64,
    out: *mut f64,
) -> GrStatus {
    guard(|| {
        if rewards.is_null() || out.is_null() {
            return fail(GrStatus::NullPointer, "rewards or out is null");
        }
        let r = std::slice::from_raw_parts(rewards, n);
        match normalize_advantages(r, std_floor) {
            Ok(a) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(&a);
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Per-token KL estimate from current and reference log-probabilities.
#[no_mangle]
pub extern "C" fn gr_kl_term(logp_current: f64, logp_ref: f64) -> f64 {
    kl_term(logp_current, logp_ref)
}

#[no_mangle]
pub extern "C" fn gr_importance_ratio(logp_current: f64, logp_old: f64) -> f64 {
    importance_ratio(logp_current, logp_old)
}

#[no_mangle]
pub extern "C" fn gr_evaluator_new() -> *mut GrEvaluator {
    Box::into_raw(Box::new(GrEvaluator {
        tasks: Vec::new(),
        preds: Vec::new(),
    }))
}

/// # Safety
/// `ev` must be NULL or a handle from `gr_evaluator_new`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn gr_evaluator_free(ev: *mut GrEvaluator) {
    if !ev.is_null() {
        drop(Box::from_raw(ev));
    }
}

/// Add tasks from JSONL text (one or more lines).
///
/// # Safety
/// `ev` must be a live evaluator; `jsonl` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gr_evaluator_add_tasks(ev: *mut GrEvaluator, jsonl: *const c_char) -> GrStatus {
    guard(|| {
        let Some(ev) = ev.as_mut() else {
            return fail(GrStatus::NullPointer, "evaluator is null");
        };
        let text = tri!(str_arg(jsonl, "jsonl"));
        match parse_tasks(text) {
            Ok(t) => {
                ev.tasks.extend(t);
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::Parse, e.to_string()),
        }
    })
}

/// Add predictions from JSONL text (one or more lines).
///
/// # Safety
/// `ev` must be a live evaluator; `jsonl` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gr_evaluator_add_predictions(ev: *mut GrEvaluator, jsonl: *const c_char) -> GrStatus {
    guard(|| {
        let Some(ev) = ev.as_mut() else {
            return fail(GrStatus::NullPointer, "evaluator is null");
        };
        let text = tri!(str_arg(jsonl, "jsonl"));
        match parse_predictions(text) {
            Ok(p) => {
                ev.preds.extend(p);
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::Parse, e.to_string()),
        }
    })
}

/// Evaluate on the default threshold grid and write the report JSON to
/// `*out` (free with `gr_string_free`).
///
/// # Safety
/// `ev` must be a live evaluator; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gr_evaluator_report_json(ev: *const GrEvaluator, out: *mut *mut c_char) -> GrStatus {
    guard(|| {
        let Some(ev) = ev.as_ref() else {
            return fail(GrStatus::NullPointer, "evaluator is null");
        };
        if out.is_null() {
            return fail(GrStatus::NullPointer, "out is null");
        }
        match evaluate(&ev.tasks, &ev.preds, &default_grid()) {
            Ok(r) => {
                let json = CString::new(report_to_json(&r)).expect("JSON has no NUL");
                *out = json.into_raw();
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::Evaluation, e.to_string()),
        }
    })
}
