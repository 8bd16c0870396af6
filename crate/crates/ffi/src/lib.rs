//! C ABI over the gatedreason core.
//!
//! Every fallible function returns a [`GrStatus`]. On a non-zero status the
//! thread-local message from [`gr_last_error`] describes the failure.
//! Strings returned through `char **` are owned by the caller and released
//! with [`gr_string_free`]. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use gatedreason::config::Config;
use gatedreason::engine::Engine;
use gatedreason::image::ImageStore;
use gatedreason::lab;
use gatedreason::trajectory::{InitialState, Trajectory};
use gatedreason::verifier::{self, StepScore, VerifierConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Config = 5,
    Endpoint = 6,
    Panic = 7,
}

/// One verifier score. `has_action` is false for the final-answer score.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GrStepScore {
    pub planning_tuned: f64,
    pub planning_reference: f64,
    pub action_tuned: f64,
    pub action_reference: f64,
    pub has_action: bool,
}

impl From<&GrStepScore> for StepScore {
    fn from(s: &GrStepScore) -> Self {
        if s.has_action {
            StepScore::step(s.planning_tuned, s.planning_reference, s.action_tuned, s.action_reference)
        } else {
            StepScore::final_answer(s.planning_tuned, s.planning_reference)
        }
    }
}

/// Opaque trajectory handle.
pub struct GrTrajectory {
    inner: Trajectory,
}

/// Opaque engine handle with its own in-memory image store.
pub struct GrEngine {
    inner: Engine,
    system_prompt: String,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: GrStatus, msg: impl Into<String>) -> GrStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GrStatus) -> GrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(GrStatus::Panic, "internal panic"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, GrStatus> {
    if p.is_null() {
        return Err(fail(GrStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GrStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn read_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], GrStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(GrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn verifier_config(eta: f64, epsilon: f64) -> Result<VerifierConfig, GrStatus> {
    VerifierConfig::new(eta, epsilon).map_err(|e| fail(GrStatus::InvalidArgument, e.to_string()))
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(GrStatus::NullPointer, concat!(stringify!($p), " is null"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn gr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Raw log-ratio of one step, before scaling by eta.
///
/// # Safety
/// `score` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gr_step_log_ratio(score: *const GrStepScore, out: *mut f64) -> GrStatus {
    guard(|| {
        out_ptr!(score);
        out_ptr!(out);
        match verifier::step_log_ratio(&StepScore::from(&*score)) {
            Ok(v) => {
                *out = v;
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Whether the stopping rule fires for `raw_ratio`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gr_should_stop(raw_ratio: f64, eta: f64, epsilon: f64, out: *mut bool) -> GrStatus {
    guard(|| {
        out_ptr!(out);
        let cfg = tri!(verifier_config(eta, epsilon));
        *out = verifier::should_stop(raw_ratio, &cfg);
        GrStatus::Ok
    })
}

/// Trajectory reward over `len` scores.
///
/// # Safety
/// `scores` must point to `len` readable scores; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gr_reward(scores: *const GrStepScore, len: usize, eta: f64, epsilon: f64, out: *mut f64) -> GrStatus {
    guard(|| {
        out_ptr!(out);
        let cfg = tri!(verifier_config(eta, epsilon));
        let scores: Vec<StepScore> = tri!(read_slice(scores, len, "scores")).iter().map(StepScore::from).collect();
        match verifier::reward(&scores, &cfg) {
            Ok(v) => {
                *out = v;
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Writes the minimizer of the KL-regularized objective into `out[0..len]`.
///
/// # Safety
/// `p0`, `values` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gr_gibbs_optimum(p0: *const f64, values: *const f64, len: usize, eta: f64, out: *mut f64) -> GrStatus {
    guard(|| {
        out_ptr!(out);
        let p0 = tri!(read_slice(p0, len, "p0"));
        let u = tri!(read_slice(values, len, "values"));
        match lab::gibbs_optimum(p0, u, eta) {
            Ok(p) => {
                std::slice::from_raw_parts_mut(out, len).copy_from_slice(&p);
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Value of the KL-regularized objective at `p`.
///
/// # Safety
/// `p`, `p0` and `values` must each point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gr_kl_objective(
    p: *const f64,
    p0: *const f64,
    values: *const f64,
    len: usize,
    eta: f64,
    out: *mut f64,
) -> GrStatus {
    guard(|| {
        out_ptr!(out);
        let p = tri!(read_slice(p, len, "p"));
        let p0 = tri!(read_slice(p0, len, "p0"));
        let u = tri!(read_slice(values, len, "values"));
        match lab::kl_objective(p, p0, u, eta) {
            Ok(v) => {
                *out = v;
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Parses a trajectory from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gr_trajectory_from_json(json: *const c_char, out: *mut *mut GrTrajectory) -> GrStatus {
    guard(|| {
        out_ptr!(out);
        let text = tri!(read_str(json, "json"));
        match Trajectory::from_json(text.as_bytes()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GrTrajectory { inner }));
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `t` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gr_trajectory_horizon(t: *const GrTrajectory, out: *mut usize) -> GrStatus {
    guard(|| {
        out_ptr!(t);
        out_ptr!(out);
        *out = (*t).inner.horizon();
        GrStatus::Ok
    })
}

/// Counts schema violations. When non-zero, [`gr_last_error`] lists them.
///
/// # Safety
/// `t` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gr_trajectory_validate(t: *const GrTrajectory, out: *mut usize) -> GrStatus {
    guard(|| {
        out_ptr!(t);
        out_ptr!(out);
        let v = (*t).inner.validate();
        if !v.is_empty() {
            set_error(format!("{v:?}"));
        }
        *out = v.len();
        GrStatus::Ok
    })
}

/// # Safety
/// `t` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gr_trajectory_to_json(t: *const GrTrajectory, out: *mut *mut c_char) -> GrStatus {
    guard(|| {
        out_ptr!(t);
        out_ptr!(out);
        let bytes = (*t).inner.to_json();
        *out = into_c_string(String::from_utf8(bytes).expect("JSON is UTF-8"));
        GrStatus::Ok
    })
}

/// # Safety
/// `t` must be NULL or a handle from [`gr_trajectory_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gr_trajectory_free(t: *mut GrTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Builds an engine from a directory of mock model fixtures
/// (`reasoner.json`, `verifier_tuned.json`, `verifier_reference.json`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gr_engine_from_mock_dir(dir: *const c_char, out: *mut *mut GrEngine) -> GrStatus {
    guard(|| {
        out_ptr!(out);
        let dir = tri!(read_str(dir, "dir"));
        let mut cfg = Config::default();
        if let Err(e) = cfg.apply_mock_dir(Path::new(dir)) {
            return fail(GrStatus::Config, e.to_string());
        }
        match cfg.engine(Arc::new(ImageStore::in_memory()), true) {
            Ok(inner) => {
                let system_prompt = cfg.engine.system_prompt.clone();
                *out = Box::into_raw(Box::new(GrEngine { inner, system_prompt }));
                GrStatus::Ok
            }
            Err(e) => fail(GrStatus::Config, e.to_string()),
        }
    })
}

/// Runs one gated episode and writes the episode report as JSON.
///
/// # Safety
/// `engine` and `out` must be valid; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gr_engine_run(
    engine: *const GrEngine,
    question: *const c_char,
    png_path: *const c_char,
    out: *mut *mut c_char,
) -> GrStatus {
    guard(|| {
        out_ptr!(engine);
        out_ptr!(out);
        let question = tri!(read_str(question, "question"));
        let path = tri!(read_str(png_path, "png_path"));
        let e = &*engine;
        let key = match e.inner.store.import_png(Path::new(path)) {
            Ok(k) => k,
            Err(err) => return fail(GrStatus::InvalidArgument, format!("{path}: {err}")),
        };
        let initial = InitialState {
            question: question.to_string(),
            image_refs: vec![key],
            system_prompt: e.system_prompt.clone(),
        };
        match e.inner.run_episode(initial) {
            Ok(report) => {
                *out = into_c_string(report.to_json());
                GrStatus::Ok
            }
            Err(err) => fail(GrStatus::Endpoint, err.to_string()),
        }
    })
}

/// # Safety
/// `e` must be NULL or a handle from [`gr_engine_from_mock_dir`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gr_engine_free(e: *mut GrEngine) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, GrStatus::Panic);
        let msg = unsafe { CStr::from_ptr(gr_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
    }

    #[test]
    fn errors_clear_on_next_call() {
        set_error("a\0b");
        assert_eq!(unsafe { CStr::from_ptr(gr_last_error()) }.to_str().unwrap(), "a b");
        assert_eq!(guard(|| GrStatus::Ok), GrStatus::Ok);
        assert!(gr_last_error().is_null());
    }

    #[test]
    fn final_scores_ignore_action_fields() {
        let s = GrStepScore {
            planning_tuned: -1.0,
            planning_reference: -1.5,
            action_tuned: 9.0,
            action_reference: 9.0,
            has_action: false,
        };
        let score = StepScore::from(&s);
        assert!(score.is_final && score.action_logprob_tuned.is_none());
    }
}
