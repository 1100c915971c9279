//! C ABI over the simulator.
//!
//! Every function returns a [`FedarenaStatus`]; on failure the message is
//! available from [`fedarena_last_error`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedarena::aggregation;
use fedarena::cli;
use fedarena::config::ExperimentConfig;
use fedarena::engine::{self, ExperimentResult, NoObserver, RunOptions};
use fedarena::tensor::GradientVector;
use fedarena::theory;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedarenaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    RuntimeError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque experiment configuration.
pub struct FedarenaConfig {
    inner: ExperimentConfig,
}

/// Opaque experiment result.
pub struct FedarenaResult {
    inner: ExperimentResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: impl std::fmt::Display) {
    LAST_ERROR.with(|e| {
        let mut v = msg.to_string().into_bytes();
        v.retain(|&b| b != 0);
        *e.borrow_mut() = v;
    });
}

fn fail(status: FedarenaStatus, msg: impl std::fmt::Display) -> FedarenaStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> FedarenaStatus) -> FedarenaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(FedarenaStatus::Panic, "internal panic"),
    }
}

fn status_of(e: &fedarena::Error) -> FedarenaStatus {
    match e {
        fedarena::Error::InvalidConfig(_) => FedarenaStatus::ConfigError,
        _ => FedarenaStatus::RuntimeError,
    }
}

/// Copies the last error message on this thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length excluding the terminator. `buf` may be null when `len` is 0.
///
/// # Safety
/// `buf` must be valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fedarena_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedarena_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration holding the shipped defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedarena_config_default(out: *mut *mut FedarenaConfig) -> FedarenaStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedarenaStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(FedarenaConfig {
            inner: ExperimentConfig::default(),
        }));
        FedarenaStatus::Ok
    })
}

/// Parses a TOML configuration. Missing keys take defaults; unknown keys
/// are rejected.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedarena_config_from_toml(
    toml: *const c_char,
    out: *mut *mut FedarenaConfig,
) -> FedarenaStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return fail(FedarenaStatus::NullPointer, "null argument");
        }
        let Ok(text) = CStr::from_ptr(toml).to_str() else {
            return fail(FedarenaStatus::InvalidArgument, "config is not UTF-8");
        };
        match cli::parse_config_str(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FedarenaConfig { inner }));
                FedarenaStatus::Ok
            }
            Err(e) => fail(FedarenaStatus::ConfigError, e.message),
        }
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `config` must come from a `fedarena_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn fedarena_config_set_seed(config: *mut FedarenaConfig, seed: u64) -> FedarenaStatus {
    guard(|| match config.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            FedarenaStatus::Ok
        }
        None => fail(FedarenaStatus::NullPointer, "config is null"),
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `config` must come from a `fedarena_config_*` constructor and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedarena_config_free(config: *mut FedarenaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs an experiment. `threads` of 0 runs sequentially; results do not
/// depend on it.
///
/// # Safety
/// `config` must be a live configuration handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedarena_run(
    config: *const FedarenaConfig,
    threads: usize,
    out: *mut *mut FedarenaResult,
) -> FedarenaStatus {
    guard(|| {
        let (Some(config), false) = (config.as_ref(), out.is_null()) else {
            return fail(FedarenaStatus::NullPointer, "null argument");
        };
        match engine::run(&config.inner, RunOptions { threads }, &mut NoObserver) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FedarenaResult { inner }));
                FedarenaStatus::Ok
            }
            Err(e) => fail(status_of(&e), e),
        }
    })
}

/// Headline metrics of a finished run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FedarenaSummary {
    pub attack_accuracy: f64,
    pub attack_precision: f64,
    pub attack_recall: f64,
    pub final_test_accuracy: f64,
    pub best_round: usize,
    pub rounds: usize,
}

/// Copies the headline metrics of `result` into `out`.
///
/// # Safety
/// `result` must be a live result handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedarena_result_summary(
    result: *const FedarenaResult,
    out: *mut FedarenaSummary,
) -> FedarenaStatus {
    guard(|| {
        let (Some(r), Some(out)) = (result.as_ref(), out.as_mut()) else {
            return fail(FedarenaStatus::NullPointer, "null argument");
        };
        let r = &r.inner;
        *out = FedarenaSummary {
            attack_accuracy: r.attack_accuracy,
            attack_precision: r.attack_precision,
            attack_recall: r.attack_recall,
            final_test_accuracy: r.final_test_accuracy,
            best_round: r.best_round,
            rounds: r.records.len(),
        };
        FedarenaStatus::Ok
    })
}

/// Test accuracy after round `round`.
///
/// # Safety
/// `result` must be a live result handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedarena_result_round_test_accuracy(
    result: *const FedarenaResult,
    round: usize,
    out: *mut f64,
) -> FedarenaStatus {
    guard(|| {
        let (Some(r), Some(out)) = (result.as_ref(), out.as_mut()) else {
            return fail(FedarenaStatus::NullPointer, "null argument");
        };
        match r.inner.records.get(round) {
            Some(rec) => {
                *out = rec.test_accuracy;
                FedarenaStatus::Ok
            }
            None => fail(
                FedarenaStatus::InvalidArgument,
                format!("round {round} out of range"),
            ),
        }
    })
}

/// Releases a result. Null is ignored.
///
/// # Safety
/// `result` must come from [`fedarena_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedarena_result_free(result: *mut FedarenaResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Angular trimmed mean of `count` row-major gradients of length `dim`.
///
/// Writes the aggregate into `aggregate` (`dim` values) and the ascending
/// indices of the kept gradients into `kept` (capacity `kept_capacity`),
/// storing their number in `kept_len`.
///
/// # Safety
/// `grads` must hold `count * dim` values, `aggregate` room for `dim`,
/// `kept` room for `kept_capacity`, and `kept_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fedarena_atm(
    grads: *const f64,
    count: usize,
    dim: usize,
    trim: usize,
    aggregate: *mut f64,
    kept: *mut usize,
    kept_capacity: usize,
    kept_len: *mut usize,
) -> FedarenaStatus {
    guard(|| {
        if grads.is_null()
            || aggregate.is_null()
            || kept_len.is_null()
            || (kept.is_null() && kept_capacity > 0)
        {
            return fail(FedarenaStatus::NullPointer, "null argument");
        }
        if count == 0 || dim == 0 {
            return fail(FedarenaStatus::InvalidArgument, "count and dim must be positive");
        }
        let Some(total) = count.checked_mul(dim) else {
            return fail(FedarenaStatus::InvalidArgument, "count * dim overflows");
        };
        let flat = std::slice::from_raw_parts(grads, total);
        let vectors: Result<Vec<GradientVector>, _> = flat
            .chunks(dim)
            .map(|c| GradientVector::new(c.to_vec()))
            .collect();
        let outcome = match vectors.and_then(|v| aggregation::atm(&v, trim)) {
            Ok(o) => o,
            Err(e) => return fail(status_of(&e), e),
        };
        *kept_len = outcome.kept_indices.len();
        if outcome.kept_indices.len() > kept_capacity {
            return fail(FedarenaStatus::BufferTooSmall, "kept buffer too small");
        }
        ptr::copy_nonoverlapping(outcome.aggregate.as_slice().as_ptr(), aggregate, dim);
        if !outcome.kept_indices.is_empty() {
            ptr::copy_nonoverlapping(outcome.kept_indices.as_ptr(), kept, outcome.kept_indices.len());
        }
        FedarenaStatus::Ok
    })
}

/// Deviation bound `2(n-m)(b+1)σ² / (n-b-m)²`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedarena_theorem1_bound(
    n: usize,
    m: usize,
    b: usize,
    sigma2: f64,
    out: *mut f64,
) -> FedarenaStatus {
    guard(|| {
        let Some(out) = out.as_mut() else {
            return fail(FedarenaStatus::NullPointer, "out is null");
        };
        match theory::theorem1_bound(n, m, b, sigma2) {
            Ok(v) => {
                *out = v;
                FedarenaStatus::Ok
            }
            Err(e) => fail(FedarenaStatus::InvalidArgument, e),
        }
    })
}
