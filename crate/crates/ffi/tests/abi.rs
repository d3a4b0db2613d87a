use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use groundref_ffi::*;

const TASK: &str = r#"{"v":1,"task_id":"t1","image_ref":"img","subset":"attribute","category":"person","expression":"the person in red","hints":[{"label":"person 1","box":[0,0,10,20]},{"label":"person 2","box":[30,0,40,20]}],"gt":[1]}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = gr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn iou_and_errors() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [5.0, 0.0, 15.0, 10.0];
    let mut out = 0.0;
    assert_eq!(unsafe { gr_iou(a.as_ptr(), b.as_ptr(), &mut out) }, GrStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);
    assert!(gr_last_error_message().is_null());

    let flat = [0.0, 0.0, 0.0, 10.0];
    assert_eq!(
        unsafe { gr_iou(a.as_ptr(), flat.as_ptr(), &mut out) },
        GrStatus::InvalidArgument
    );
    assert!(last_error().contains("b"));
    assert_eq!(
        unsafe { gr_iou(ptr::null(), b.as_ptr(), &mut out) },
        GrStatus::NullPointer
    );
}

#[test]
fn response_handle() {
    let raw = c("<think>x</think><answer>[{\"person 1\": [0, 0, 10, 20]}, {\"person 2\": [30, 0, 40, 20]}]</answer>");
    let mut ok = false;
    assert_eq!(unsafe { gr_validate_format(raw.as_ptr(), &mut ok) }, GrStatus::Ok);
    assert!(ok);
    unsafe {
        let r = gr_response_parse(raw.as_ptr());
        assert!(!r.is_null());
        assert!(gr_response_format_ok(r));
        assert_eq!(gr_response_answer_kind(r), GrAnswerKind::Boxes);
        assert_eq!(gr_response_box_count(r), 2);
        let mut b = [0.0; 4];
        assert_eq!(gr_response_box(r, 1, b.as_mut_ptr()), GrStatus::Ok);
        assert_eq!(b, [30.0, 0.0, 40.0, 20.0]);
        assert_eq!(gr_response_box(r, 2, b.as_mut_ptr()), GrStatus::OutOfRange);
        gr_response_free(r);

        let r = gr_response_parse(c("no tags").as_ptr());
        assert!(!gr_response_format_ok(r));
        assert_eq!(gr_response_answer_kind(r), GrAnswerKind::Unparseable);
        assert_eq!(gr_response_box_count(r), 0);
        gr_response_free(r);
        gr_response_free(ptr::null_mut());

        let bad = [0xffu8, 0];
        assert!(gr_response_parse(bad.as_ptr().cast()).is_null());
        assert!(last_error().contains("UTF-8"));
    }
}

#[test]
fn reward_and_optimizer_primitives() {
    let mut rb = GrRewardBreakdown::default();
    let raw = c("<think>x</think><answer>[{\"person 1\": [0, 0, 10, 20]}, {\"person 2\": [30, 0, 40, 20]}]</answer>");
    let task = c(TASK);
    assert_eq!(
        unsafe { gr_reward_response(task.as_ptr(), raw.as_ptr(), 0.9, &mut rb) },
        GrStatus::Ok
    );
    assert_eq!(rb.precision, 0.5);
    assert_eq!(rb.recall, 1.0);
    assert!((rb.total - (0.9 * 2.0 / 3.0 + 0.1)).abs() < 1e-12);
    assert_eq!(
        unsafe { gr_reward_response(task.as_ptr(), raw.as_ptr(), 1.5, &mut rb) },
        GrStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { gr_reward_response(c("{}").as_ptr(), raw.as_ptr(), 0.9, &mut rb) },
        GrStatus::Parse
    );

    let rewards = [1.0, 0.0, 1.0, 0.0];
    let mut adv = [9.0; 4];
    assert_eq!(
        unsafe { gr_normalize_advantages(rewards.as_ptr(), 4, 0.0, adv.as_mut_ptr()) },
        GrStatus::Ok
    );
    assert_eq!(adv, [1.0, -1.0, 1.0, -1.0]);
    assert_eq!(
        unsafe { gr_normalize_advantages(rewards.as_ptr(), 1, 0.0, adv.as_mut_ptr()) },
        GrStatus::InvalidArgument
    );

    assert!((gr_kl_term(0.5f64.ln(), 0.25f64.ln()) - 0.306852819440055).abs() < 1e-12);
    assert_eq!(gr_importance_ratio(-1.0, -1.0), 1.0);
}

#[test]
fn evaluator_handle() {
    unsafe {
        let ev = gr_evaluator_new();
        assert_eq!(gr_evaluator_add_tasks(ev, c(TASK).as_ptr()), GrStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(gr_evaluator_report_json(ev, &mut out), GrStatus::Evaluation);
        assert!(last_error().contains("t1"));

        let pred = c(r#"{"v":1,"task_id":"t1","boxes":[{"label":"person 1","box":[0,0,10,20]}]}"#);
        assert_eq!(gr_evaluator_add_predictions(ev, pred.as_ptr()), GrStatus::Ok);
        assert_eq!(gr_evaluator_add_predictions(ev, c("{").as_ptr()), GrStatus::Parse);
        assert_eq!(gr_evaluator_report_json(ev, &mut out), GrStatus::Ok);
        let json = CStr::from_ptr(out).to_str().unwrap().to_string();
        gr_string_free(out);
        gr_evaluator_free(ev);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["per_subset"]["attribute"]["df1"], 1.0);
        assert_eq!(v["rejection_score"], serde_json::Value::Null);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(gr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Compile `smoke.c` against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = target_dir.join("libgroundref_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
