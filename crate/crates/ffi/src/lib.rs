//! C ABI over the edgelam scenario runners.
//!
//! Handles are opaque. Every fallible call returns an [`EdgelamStatus`];
//! on failure the thread's last error (a JSON record) is available from
//! [`edgelam_last_error`]. Strings handed out by this library must be
//! released with [`edgelam_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use edgelam::app::{self, AppError, Artifact, Command, Scenario};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgelamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    MissingSection = 4,
    RuntimeError = 5,
    IoError = 6,
    UnknownCommand = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// A parsed, validated scenario.
pub struct EdgelamScenario {
    inner: Scenario,
}

/// Artifacts produced by one run, held in memory.
pub struct EdgelamRun {
    artifacts: Vec<(CString, Artifact)>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: EdgelamStatus, msg: impl Into<String>) -> EdgelamStatus {
    let record = serde_json::json!({ "error": format!("{status:?}"), "message": msg.into() });
    set_error(record.to_string());
    status
}

fn app_fail(e: AppError) -> EdgelamStatus {
    let status = match e {
        AppError::ConfigParse { .. } => EdgelamStatus::ConfigError,
        AppError::MissingSection(_) => EdgelamStatus::MissingSection,
        AppError::Io { .. } => EdgelamStatus::IoError,
        _ => EdgelamStatus::RuntimeError,
    };
    set_error(e.record().to_string());
    status
}

fn guard(f: impl FnOnce() -> EdgelamStatus) -> EdgelamStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(EdgelamStatus::Panic, "panic inside edgelam"))
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, EdgelamStatus> {
    if p.is_null() {
        return Err(fail(EdgelamStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(EdgelamStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn command(name: &str) -> Option<Command> {
    Command::ALL.into_iter().find(|c| c.name() == name)
}

/// Message of the last failed call on this thread as a JSON record, or
/// null. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn edgelam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn edgelam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses scenario TOML, applying `n_overrides` `key=value` strings in
/// order. On success `*out` owns a new handle.
///
/// # Safety
/// `toml` is a NUL-terminated string; `overrides` points to `n_overrides`
/// such strings (or is null when `n_overrides` is 0); `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn edgelam_scenario_parse(
    toml: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut EdgelamScenario,
) -> EdgelamStatus {
    guard(|| {
        if out.is_null() {
            return fail(EdgelamStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        if n_overrides > 0 && overrides.is_null() {
            return fail(EdgelamStatus::NullPointer, "overrides is null");
        }
        let mut sets = Vec::with_capacity(n_overrides);
        for i in 0..n_overrides {
            match read_str(*overrides.add(i), "override") {
                Ok(s) => sets.push(s.to_string()),
                Err(s) => return s,
            }
        }
        match Scenario::parse(text, &sets) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(EdgelamScenario { inner }));
                EdgelamStatus::Ok
            }
            Err(e) => app_fail(e),
        }
    })
}

/// # Safety
/// `scenario` is null or a handle from [`edgelam_scenario_parse`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn edgelam_scenario_free(scenario: *mut EdgelamScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn edgelam_scenario_seed(scenario: *const EdgelamScenario) -> u64 {
    scenario.as_ref().map_or(0, |s| s.inner.seed)
}

/// # Safety
/// `scenario` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn edgelam_scenario_set_seed(scenario: *mut EdgelamScenario, seed: u64) -> EdgelamStatus {
    match scenario.as_mut() {
        Some(s) => {
            s.inner.seed = seed;
            EdgelamStatus::Ok
        }
        None => fail(EdgelamStatus::NullPointer, "scenario is null"),
    }
}

/// Dry-run validation. `*report_json` receives `{"issues": [...]}` and
/// `*n_issues` the issue count; free the string with
/// [`edgelam_string_free`].
///
/// # Safety
/// `scenario` is a live handle; both out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn edgelam_verify(
    scenario: *const EdgelamScenario,
    report_json: *mut *mut c_char,
    n_issues: *mut usize,
) -> EdgelamStatus {
    guard(|| {
        let Some(s) = scenario.as_ref() else { return fail(EdgelamStatus::NullPointer, "scenario is null") };
        if report_json.is_null() || n_issues.is_null() {
            return fail(EdgelamStatus::NullPointer, "output pointer is null");
        }
        let report = app::verify(&s.inner);
        let text = serde_json::to_string(&report).unwrap_or_default();
        *n_issues = report.issues.len();
        *report_json = CString::new(text).unwrap_or_default().into_raw();
        EdgelamStatus::Ok
    })
}

/// Runs a subcommand (`fedft`, `tparallel`, `micro-deploy`,
/// `micro-orchestrate`, `micro-migrate`, `chanpred`) in memory.
///
/// # Safety
/// `scenario` is a live handle, `command_name` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn edgelam_run(
    scenario: *const EdgelamScenario,
    command_name: *const c_char,
    out: *mut *mut EdgelamRun,
) -> EdgelamStatus {
    guard(|| {
        if out.is_null() {
            return fail(EdgelamStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(s) = scenario.as_ref() else { return fail(EdgelamStatus::NullPointer, "scenario is null") };
        let name = match read_str(command_name, "command") {
            Ok(n) => n,
            Err(st) => return st,
        };
        let Some(cmd) = command(name) else {
            return fail(EdgelamStatus::UnknownCommand, format!("unknown command `{name}`"));
        };
        match app::run_command(cmd, &s.inner) {
            Ok(arts) => {
                let artifacts = arts
                    .into_iter()
                    .map(|a| (CString::new(a.name.clone()).unwrap_or_default(), a))
                    .collect();
                *out = Box::into_raw(Box::new(EdgelamRun { artifacts }));
                EdgelamStatus::Ok
            }
            Err(e) => app_fail(e),
        }
    })
}

/// # Safety
/// `run` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn edgelam_run_count(run: *const EdgelamRun) -> usize {
    run.as_ref().map_or(0, |r| r.artifacts.len())
}

/// Name and contents of artifact `index`. Both pointers borrow from `run`.
///
/// # Safety
/// `run` is a live handle; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn edgelam_run_artifact(
    run: *const EdgelamRun,
    index: usize,
    name: *mut *const c_char,
    data: *mut *const u8,
    len: *mut usize,
) -> EdgelamStatus {
    let Some(r) = run.as_ref() else { return fail(EdgelamStatus::NullPointer, "run is null") };
    if name.is_null() || data.is_null() || len.is_null() {
        return fail(EdgelamStatus::NullPointer, "output pointer is null");
    }
    let Some((cname, a)) = r.artifacts.get(index) else {
        return fail(EdgelamStatus::OutOfRange, format!("artifact {index} of {}", r.artifacts.len()));
    };
    *name = cname.as_ptr();
    *data = a.bytes.as_ptr();
    *len = a.bytes.len();
    EdgelamStatus::Ok
}

/// Writes every artifact into `dir` atomically, creating it if needed.
///
/// # Safety
/// `run` is a live handle and `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn edgelam_run_write(run: *const EdgelamRun, dir: *const c_char) -> EdgelamStatus {
    guard(|| {
        let Some(r) = run.as_ref() else { return fail(EdgelamStatus::NullPointer, "run is null") };
        let dir = match read_str(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let arts: Vec<Artifact> = r.artifacts.iter().map(|(_, a)| a.clone()).collect();
        match app::write_artifacts(Path::new(dir), &arts) {
            Ok(_) => EdgelamStatus::Ok,
            Err(e) => app_fail(e),
        }
    })
}

/// # Safety
/// `run` is null or a handle from [`edgelam_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edgelam_run_free(run: *mut EdgelamRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edgelam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
