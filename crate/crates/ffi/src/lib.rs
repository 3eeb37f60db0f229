//! C ABI for the federated IDS training simulator.
//!
//! Configurations are opaque handles created from TOML text or files,
//! tweaked through string key/value setters, and consumed by
//! [`sentinel_run`], which writes the same artifacts as the CLI `run`
//! subcommand. Every call returns a status code; the detail message of the
//! most recent failure on the current thread is available through
//! [`sentinel_last_error`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::{c_char, size_t};

use sentinel_core::config::RunConfig;
use sentinel_core::report::write_run_artifacts;
use sentinel_core::run::execute_run;
use sentinel_core::SentinelError;

/// Status code of every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentinelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ConfigError = 4,
    DataError = 5,
    NumericError = 6,
    IoError = 7,
    PartitionError = 8,
    GradcheckFailed = 9,
    Panic = 10,
}

/// Opaque run configuration handle.
pub struct SentinelConfig {
    inner: RunConfig,
}

/// Headline numbers of a finished run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SentinelRunMetrics {
    pub rounds_completed: u64,
    /// Mean macro-F1 across clients at the final round (teacher for the
    /// dual-model variants, global model for the baseline).
    pub final_mean_macro_f1: f64,
    pub final_std_macro_f1: f64,
    pub student_param_count: u64,
    pub teacher_param_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &SentinelError) -> SentinelStatus {
    match err {
        SentinelError::Dimension { .. } | SentinelError::InvalidArgument(_) | SentinelError::Index(_) => {
            SentinelStatus::InvalidArgument
        }
        SentinelError::Config(_) => SentinelStatus::ConfigError,
        SentinelError::Data(_) => SentinelStatus::DataError,
        SentinelError::Numeric { .. } => SentinelStatus::NumericError,
        SentinelError::Io { .. } => SentinelStatus::IoError,
        SentinelError::Partition(_) => SentinelStatus::PartitionError,
    }
}

fn fail(err: &SentinelError) -> SentinelStatus {
    set_last_error(&err.to_string());
    status_of(err)
}

fn guard<F: FnOnce() -> SentinelStatus>(f: F) -> SentinelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            SentinelStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, SentinelStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(SentinelStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("argument is not valid UTF-8");
        SentinelStatus::InvalidUtf8
    })
}

/// Copy the detail message of the most recent failure on this thread into
/// `buf` (truncated to `len` bytes including the terminating NUL).
/// Returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes (or be null).
#[no_mangle]
pub unsafe extern "C" fn sentinel_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // always NUL-terminate what was written
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sentinel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// New configuration with the reference defaults. Never fails.
/// Free with [`sentinel_config_free`].
#[no_mangle]
pub extern "C" fn sentinel_config_new() -> *mut SentinelConfig {
    Box::into_raw(Box::new(SentinelConfig {
        inner: RunConfig::default(),
    }))
}

/// Parse a configuration from TOML text.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` must be a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_from_string(
    text: *const c_char,
    out: *mut *mut SentinelConfig,
) -> SentinelStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return SentinelStatus::NullPointer;
        }
        let text = match cstr_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match RunConfig::parse(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(SentinelConfig { inner: cfg }));
                SentinelStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Parse a configuration from a TOML file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_from_file(
    path: *const c_char,
    out: *mut *mut SentinelConfig,
) -> SentinelStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return SentinelStatus::NullPointer;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match RunConfig::from_file(path) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(SentinelConfig { inner: cfg }));
                SentinelStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Set one configuration key from its TOML value representation, e.g.
/// `sentinel_config_set(cfg, "alpha", "0.1")` or
/// `sentinel_config_set(cfg, "variant", "\"fedavg\"")`.
///
/// # Safety
/// `cfg` must be a live handle from this library; `key` and `value` must
/// be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_set(
    cfg: *mut SentinelConfig,
    key: *const c_char,
    value: *const c_char,
) -> SentinelStatus {
    guard(|| {
        let Some(handle) = cfg.as_mut() else {
            set_last_error("null configuration handle");
            return SentinelStatus::NullPointer;
        };
        let key = match cstr_arg(key) {
            Ok(k) => k,
            Err(s) => return s,
        };
        let value = match cstr_arg(value) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match handle.inner.set_key(key, value) {
            Ok(()) => SentinelStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Convenience seed setter.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_set_seed(
    cfg: *mut SentinelConfig,
    seed: u64,
) -> SentinelStatus {
    guard(|| {
        let Some(handle) = cfg.as_mut() else {
            set_last_error("null configuration handle");
            return SentinelStatus::NullPointer;
        };
        handle.inner.seed = seed;
        SentinelStatus::Ok
    })
}

/// Convenience thread-count setter (0 selects one worker per core).
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_set_threads(
    cfg: *mut SentinelConfig,
    threads: size_t,
) -> SentinelStatus {
    guard(|| {
        let Some(handle) = cfg.as_mut() else {
            set_last_error("null configuration handle");
            return SentinelStatus::NullPointer;
        };
        handle.inner.threads = threads;
        SentinelStatus::Ok
    })
}

/// Convenience output-directory setter.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_set_out_dir(
    cfg: *mut SentinelConfig,
    out_dir: *const c_char,
) -> SentinelStatus {
    guard(|| {
        let Some(handle) = cfg.as_mut() else {
            set_last_error("null configuration handle");
            return SentinelStatus::NullPointer;
        };
        let dir = match cstr_arg(out_dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        handle.inner.out_dir = dir.to_string();
        SentinelStatus::Ok
    })
}

/// Execute the configured experiment, write `rounds.csv`, `summary.json`,
/// `effective_config.toml` and `label_mapping.json` into the configured
/// output directory, and (when `metrics` is non-null) report the headline
/// numbers.
///
/// # Safety
/// `cfg` must be a live handle; `metrics` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sentinel_run(
    cfg: *const SentinelConfig,
    metrics: *mut SentinelRunMetrics,
) -> SentinelStatus {
    guard(|| {
        let Some(handle) = cfg.as_ref() else {
            set_last_error("null configuration handle");
            return SentinelStatus::NullPointer;
        };
        let artifacts = match execute_run(&handle.inner) {
            Ok(a) => a,
            Err(e) => return fail(&e),
        };
        let out_dir = PathBuf::from(&handle.inner.out_dir);
        if let Err(e) = write_run_artifacts(&handle.inner, &artifacts, &out_dir) {
            return fail(&e);
        }
        if let Some(slot) = metrics.as_mut() {
            let headline = match artifacts.variant {
                sentinel_core::model::Variant::FedAvg => "global",
                _ => "teacher",
            };
            let (mean, std) = artifacts
                .reports
                .last()
                .map(|last| {
                    let f1s: Vec<f64> = last
                        .rows
                        .iter()
                        .filter(|r| r.model.name() == headline)
                        .map(|r| r.macro_f1)
                        .collect();
                    sentinel_core::metrics::mean_std(&f1s).unwrap_or((0.0, 0.0))
                })
                .unwrap_or((0.0, 0.0));
            *slot = SentinelRunMetrics {
                rounds_completed: artifacts.reports.len() as u64,
                final_mean_macro_f1: mean,
                final_std_macro_f1: std,
                student_param_count: artifacts.student_param_count as u64,
                teacher_param_count: artifacts.teacher_param_count as u64,
            };
        }
        SentinelStatus::Ok
    })
}

/// Verify every analytic gradient against central finite differences.
/// Returns `Ok` when all worst-case relative errors stay below `1e-4`,
/// `GradcheckFailed` otherwise; the worst error lands in `max_rel_err`
/// when non-null.
///
/// # Safety
/// `max_rel_err` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sentinel_gradcheck(
    trials: size_t,
    seed: u64,
    max_rel_err: *mut f64,
) -> SentinelStatus {
    guard(|| {
        let results = sentinel_core::gradcheck::run_all(trials.max(1), seed);
        let worst = results
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0f64, f64::max);
        if let Some(slot) = max_rel_err.as_mut() {
            *slot = worst;
        }
        if results.iter().all(|r| r.passed(1e-4)) {
            SentinelStatus::Ok
        } else {
            set_last_error(&format!(
                "gradient check failed: worst relative error {worst:.3e}"
            ));
            SentinelStatus::GradcheckFailed
        }
    })
}

/// Release a configuration handle. Null is a no-op.
///
/// # Safety
/// `cfg` must be null or a handle previously returned by this library,
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sentinel_config_free(cfg: *mut SentinelConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}
