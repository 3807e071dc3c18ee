//! C ABI over the claim-judging engine.
//!
//! Handles are opaque; every fallible call returns a [`CjStatus`] and, on
//! failure, stores a message readable through [`cj_last_error_message`] on
//! the same thread. Strings returned through out-parameters are owned by the
//! caller and must be released with [`cj_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use clinjudge::judge::JudgeError;
use clinjudge::{judge_note, parse_soap_note, parse_transcript, ExtractorConfig, KnowledgeBase, PolicyConfig, PolicyId};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CjStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    KbError = 4,
    JudgeError = 5,
    InvalidArgument = 6,
    Panic = 99,
}

/// Judging policy, passed to [`cj_judge_note`] as its integer value.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CjPolicy {
    Stage1Strict = 1,
    Stage2InferenceAware = 2,
}

/// Opaque knowledge-base handle.
pub struct CjKb {
    kb: KnowledgeBase,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CjStatus, String);

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, translating failures and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CjStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CjStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CjStatus::Panic
        }
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CjStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(CjStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(CjStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn kb_ref<'a>(kb: *const CjKb) -> Result<&'a KnowledgeBase, Failure> {
    if kb.is_null() {
        return Err(Failure(CjStatus::NullArgument, "kb is null".into()));
    }
    // SAFETY: non-null handles come from cj_kb_seed/cj_kb_load_bundle.
    Ok(unsafe { &(*kb).kb })
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Creates a handle to the bundled seed knowledge base.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cj_kb_seed(out: *mut *mut CjKb) -> CjStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(CjKb { kb: KnowledgeBase::seed() }));
        Ok(())
    })
}

/// Loads a knowledge base from bundle JSON text.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cj_kb_load_bundle(json: *const c_char, out: *mut *mut CjKb) -> CjStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let json = arg_str(json, "json")?;
        let kb = KnowledgeBase::from_bundle_json(json).map_err(|e| Failure(CjStatus::KbError, e.to_string()))?;
        *out = Box::into_raw(Box::new(CjKb { kb }));
        Ok(())
    })
}

/// Releases a knowledge-base handle. Null is ignored.
///
/// # Safety
/// `kb` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cj_kb_free(kb: *mut CjKb) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

/// Resolves a surface term to its concept id. Writes null to `out` when the
/// term is unknown.
///
/// # Safety
/// `kb` must be a live handle, `term` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cj_kb_resolve(kb: *const CjKb, term: *const c_char, out: *mut *mut c_char) -> CjStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let kb = kb_ref(kb)?;
        let term = arg_str(term, "term")?;
        if let Some(c) = kb.resolve(term) {
            *out = into_c_string(c.concept_id);
        }
        Ok(())
    })
}

/// Judges a SOAP note against a transcript (both in their text formats) and
/// writes the note report as JSON to `out`. `policy` is a [`CjPolicy`]
/// value; anything else yields `InvalidArgument`.
///
/// # Safety
/// `kb` must be a live handle, the texts nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cj_judge_note(
    kb: *const CjKb,
    transcript: *const c_char,
    soap_note: *const c_char,
    policy: u32,
    out: *mut *mut c_char,
) -> CjStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let kb = kb_ref(kb)?;
        let policy = match policy {
            p if p == CjPolicy::Stage1Strict as u32 => PolicyId::Stage1Strict,
            p if p == CjPolicy::Stage2InferenceAware as u32 => PolicyId::Stage2InferenceAware,
            other => return Err(Failure(CjStatus::InvalidArgument, format!("unknown policy {other}"))),
        };
        let parse = |e: clinjudge::ModelError| Failure(CjStatus::ParseError, e.to_string());
        let t = parse_transcript(arg_str(transcript, "transcript")?, "transcript").map_err(parse)?;
        let s = parse_soap_note(arg_str(soap_note, "soap_note")?, "note").map_err(parse)?;
        let report = judge_note(&t, &s, kb, &ExtractorConfig::default(), &PolicyConfig::for_policy(policy))
            .map_err(|e| match e {
                JudgeError::Model(m) => Failure(CjStatus::ParseError, m.to_string()),
                other => Failure(CjStatus::JudgeError, other.to_string()),
            })?;
        let json = serde_json::to_string(&report).map_err(|e| Failure(CjStatus::JudgeError, e.to_string()))?;
        *out = into_c_string(json);
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cj_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cj_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn cj_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
