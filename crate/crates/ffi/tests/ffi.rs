use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use clinjudge_ffi::*;

fn fixture(name: &str) -> CString {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/fixtures").join(name);
    CString::new(std::fs::read_to_string(path).unwrap()).unwrap()
}

fn last_error() -> String {
    let p = cj_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn seed() -> *mut CjKb {
    let mut kb = ptr::null_mut();
    assert_eq!(unsafe { cj_kb_seed(&mut kb) }, CjStatus::Ok);
    assert!(!kb.is_null());
    kb
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    cj_string_free(s);
    out
}

#[test]
fn resolves_trade_names() {
    let kb = seed();
    let mut out = ptr::null_mut();
    let term = CString::new("Zestril").unwrap();
    unsafe {
        assert_eq!(cj_kb_resolve(kb, term.as_ptr(), &mut out), CjStatus::Ok);
        assert_eq!(take(out), "drug.lisinopril");
        let unknown = CString::new("no such thing").unwrap();
        assert_eq!(cj_kb_resolve(kb, unknown.as_ptr(), &mut out), CjStatus::Ok);
        assert!(out.is_null());
        cj_kb_free(kb);
    }
    assert!(cj_last_error_message().is_null());
}

#[test]
fn judges_the_fixture_under_both_policies() {
    let kb = seed();
    let (t, s) = (fixture("gi_visit.transcript"), fixture("golden.soap"));
    for (policy, flagged) in [(CjPolicy::Stage1Strict, 12), (CjPolicy::Stage2InferenceAware, 2)] {
        let mut out = ptr::null_mut();
        let status = unsafe { cj_judge_note(kb, t.as_ptr(), s.as_ptr(), policy as u32, &mut out) };
        assert_eq!(status, CjStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&unsafe { take(out) }).unwrap();
        let verdicts = report["verdicts"].as_array().unwrap();
        assert_eq!(verdicts.len(), 17);
        assert_eq!(verdicts.iter().filter(|v| v["label"] == "Hallucinated").count(), flagged);
    }
    unsafe { cj_kb_free(kb) };
}

#[test]
fn errors_set_status_and_message() {
    let kb = seed();
    let mut out = ptr::null_mut();
    let t = fixture("gi_visit.transcript");
    let bad = CString::new("#format-version: 1\nNurse: hello\n").unwrap();
    unsafe {
        assert_eq!(cj_judge_note(kb, ptr::null(), t.as_ptr(), 1, &mut out), CjStatus::NullArgument);
        assert!(last_error().contains("transcript"));
        assert_eq!(cj_judge_note(kb, bad.as_ptr(), t.as_ptr(), 1, &mut out), CjStatus::ParseError);
        assert!(out.is_null());
        assert_eq!(cj_judge_note(kb, t.as_ptr(), t.as_ptr(), 7, &mut out), CjStatus::InvalidArgument);
        assert!(last_error().contains('7'));
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(cj_kb_resolve(kb, invalid.as_ptr().cast(), &mut out), CjStatus::InvalidUtf8);
        assert_eq!(cj_kb_resolve(ptr::null(), t.as_ptr(), &mut out), CjStatus::NullArgument);
        let mut handle = ptr::null_mut();
        let json = CString::new("{\"format_version\": \"1\"}").unwrap();
        assert_eq!(cj_kb_load_bundle(json.as_ptr(), &mut handle), CjStatus::KbError);
        assert!(handle.is_null());
        cj_kb_free(kb);
        cj_kb_free(ptr::null_mut());
        cj_string_free(ptr::null_mut());
    }
}

#[test]
fn bundle_round_trips_through_the_abi() {
    let json = CString::new(clinjudge::KnowledgeBase::seed().to_bundle_json()).unwrap();
    let mut kb = ptr::null_mut();
    unsafe {
        assert_eq!(cj_kb_load_bundle(json.as_ptr(), &mut kb), CjStatus::Ok);
        cj_kb_free(kb);
    }
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(cj_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// The generated header compiles as C and C++ when a compiler is present.
#[test]
fn header_compiles() {
    let dir = tempfile::tempdir().unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"clinjudge.h\"\nint main(void) { CjKb *kb = 0; CjStatus s = cj_kb_seed(&kb); return s == CJ_STATUS_OK ? 0 : (int)CJ_POLICY_STAGE2_INFERENCE_AWARE; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let status = std::process::Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not found; header check skipped"),
        }
    }
}
