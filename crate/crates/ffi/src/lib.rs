//! C ABI for the simulator: load a scenario, run it, query the outcome.
//!
//! Handles are opaque; every fallible call returns a status code and the
//! last error message is retrievable per thread via [`orthrus_last_error`].
//! Strings returned by this library are heap-allocated and must be released
//! with [`orthrus_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use orthrus::execution::OrderingMode;
use orthrus::sim::config::ScenarioConfig;
use orthrus::sim::{run_scenario, RunResult, SimError};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<Vec<u8>>) {
    let message = CString::new(message).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthrusStatus {
    Ok = 0,
    /// A protocol property or oracle check failed during the run.
    PropertyViolation = 1,
    /// The configuration was missing, unreadable, or invalid.
    ConfigError = 2,
    IoError = 3,
    NullArgument = 4,
    InvalidUtf8 = 5,
}

/// Opaque handle to one completed simulation run.
pub struct OrthrusRun {
    result: RunResult,
}

/// Transaction subset selector for latency queries.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthrusTxFilter {
    All = 0,
    Payment = 1,
    Contract = 2,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, OrthrusStatus> {
    if ptr.is_null() {
        return Err(OrthrusStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        OrthrusStatus::InvalidUtf8
    })
}

fn run_status(err: &SimError) -> OrthrusStatus {
    match err {
        SimError::Replica { .. } | SimError::Agreement { .. } => OrthrusStatus::PropertyViolation,
        SimError::Config(_) => OrthrusStatus::ConfigError,
        SimError::Io(_) => OrthrusStatus::IoError,
    }
}

fn execute(
    cfg: ScenarioConfig,
    seed: u64,
    mode: Option<&str>,
    out_run: *mut *mut OrthrusRun,
) -> OrthrusStatus {
    let mut cfg = cfg;
    match mode {
        None => {}
        Some("orthrus") => cfg.scenario.mode = OrderingMode::Orthrus,
        Some("global_all") => cfg.scenario.mode = OrderingMode::GlobalAll,
        Some(other) => {
            set_error(format!("unknown mode `{other}` (expected orthrus or global_all)"));
            return OrthrusStatus::ConfigError;
        }
    }
    if let Err(err) = cfg.validate() {
        set_error(err.to_string());
        return OrthrusStatus::ConfigError;
    }
    match run_scenario(&cfg, seed) {
        Ok(result) => {
            let handle = Box::new(OrthrusRun { result });
            unsafe { *out_run = Box::into_raw(handle) };
            OrthrusStatus::Ok
        }
        Err(err) => {
            let status = run_status(&err);
            set_error(err.to_string());
            status
        }
    }
}

/// Run a scenario from a TOML config file. On success `*out_run` owns the
/// result and must be released with [`orthrus_run_free`].
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string; `mode` may be NULL
/// (keep the config's mode) or one of `"orthrus"`/`"global_all"`; `out_run`
/// must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_scenario(
    config_path: *const c_char,
    seed: u64,
    mode: *const c_char,
    out_run: *mut *mut OrthrusRun,
) -> OrthrusStatus {
    if out_run.is_null() {
        return OrthrusStatus::NullArgument;
    }
    let path = match unsafe { cstr(config_path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    let mode = if mode.is_null() {
        None
    } else {
        match unsafe { cstr(mode) } {
            Ok(m) => Some(m),
            Err(status) => return status,
        }
    };
    let cfg = match ScenarioConfig::from_file(Path::new(path)) {
        Ok(cfg) => cfg,
        Err(err) => {
            set_error(err.to_string());
            return OrthrusStatus::ConfigError;
        }
    };
    execute(cfg, seed, mode, out_run)
}

/// Run a scenario from TOML text instead of a file.
///
/// # Safety
/// `config_toml` must be a valid NUL-terminated string; `out_run` must point
/// to writable memory.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_scenario_str(
    config_toml: *const c_char,
    seed: u64,
    out_run: *mut *mut OrthrusRun,
) -> OrthrusStatus {
    if out_run.is_null() {
        return OrthrusStatus::NullArgument;
    }
    let text = match unsafe { cstr(config_toml) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let cfg = match ScenarioConfig::from_str(text) {
        Ok(cfg) => cfg,
        Err(err) => {
            set_error(err.to_string());
            return OrthrusStatus::ConfigError;
        }
    };
    execute(cfg, seed, None, out_run)
}

/// True when every oracle verdict of the run passed.
///
/// # Safety
/// `run` must be a live handle from a run constructor.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_passed(run: *const OrthrusRun) -> bool {
    unsafe { run.as_ref() }.map_or(false, |r| r.result.passed())
}

/// True when every transaction reached client confirmation.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_all_confirmed(run: *const OrthrusRun) -> bool {
    unsafe { run.as_ref() }.map_or(false, |r| r.result.all_confirmed)
}

/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_confirmed(run: *const OrthrusRun) -> u64 {
    unsafe { run.as_ref() }.map_or(0, |r| r.result.metrics.confirmed_count() as u64)
}

/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_submitted(run: *const OrthrusRun) -> u64 {
    unsafe { run.as_ref() }.map_or(0, |r| r.result.metrics.submitted_count() as u64)
}

/// Simulated completion time of the run in seconds.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_completion_seconds(run: *const OrthrusRun) -> f64 {
    unsafe { run.as_ref() }.map_or(0.0, |r| r.result.completion as f64 / 1e9)
}

/// Mean end-to-end latency in milliseconds over the selected transaction
/// kind; negative when no transaction matched.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_mean_latency_ms(
    run: *const OrthrusRun,
    filter: OrthrusTxFilter,
) -> f64 {
    let Some(run) = (unsafe { run.as_ref() }) else { return -1.0 };
    let mean = match filter {
        OrthrusTxFilter::All => run.result.metrics.mean_latency(|_| true),
        OrthrusTxFilter::Payment => {
            run.result.metrics.mean_latency_by_kind(orthrus::domain::TxKind::Payment)
        }
        OrthrusTxFilter::Contract => {
            run.result.metrics.mean_latency_by_kind(orthrus::domain::TxKind::Contract)
        }
    };
    mean.map_or(-1.0, |ns| ns / 1e6)
}

/// Write the run's metrics, verdicts, and resolved config into a directory.
///
/// # Safety
/// `run` must be a live handle and `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_write_outputs(
    run: *const OrthrusRun,
    dir: *const c_char,
) -> OrthrusStatus {
    let Some(run) = (unsafe { run.as_ref() }) else { return OrthrusStatus::NullArgument };
    let dir = match unsafe { cstr(dir) } {
        Ok(d) => d,
        Err(status) => return status,
    };
    match run.result.write_outputs(Path::new(dir)) {
        Ok(()) => OrthrusStatus::Ok,
        Err(err) => {
            set_error(err.to_string());
            OrthrusStatus::IoError
        }
    }
}

/// The run's oracle verdicts as newline-separated text; release with
/// [`orthrus_string_free`]. NULL on a dead handle.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_verdicts(run: *const OrthrusRun) -> *mut c_char {
    let Some(run) = (unsafe { run.as_ref() }) else { return ptr::null_mut() };
    CString::new(run.result.oracle.render())
        .map_or(ptr::null_mut(), CString::into_raw)
}

/// Release a run handle. NULL is ignored.
///
/// # Safety
/// `run` must come from a run constructor and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn orthrus_run_free(run: *mut OrthrusRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Last error message recorded on this thread; release with
/// [`orthrus_string_free`]. NULL when no error was recorded.
#[no_mangle]
pub extern "C" fn orthrus_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null_mut(), |msg| msg.clone().into_raw())
    })
}

/// Release a string allocated by this library. NULL is ignored.
///
/// # Safety
/// `s` must originate from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn orthrus_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Crate version as a static string; do not free.
#[no_mangle]
pub extern "C" fn orthrus_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
