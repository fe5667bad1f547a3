//! C ABI over the simulator: opaque handles for datasets and run
//! configurations, status-code returns, and a thread-local last-error
//! message. Every entry point catches panics; raw pointers never cross
//! back out except as handles the caller frees through fk_*_free.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fedkws::config::{execute_run, parse_config_str, RunConfig};
use fedkws::data::{gen_synthetic, load_dataset, save_dataset, Dataset};
use fedkws::metrics::{frr_at_far, ScoredSet};
use fedkws::Error;

/// Outcome of every call. Anything but Ok leaves a message for
/// fk_last_error on the calling thread.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Rejected configuration value or key.
    Config = 3,
    /// Tensor or parameter geometry mismatch.
    Shape = 4,
    /// Value outside an operation's domain.
    Domain = 5,
    /// Operation called out of order.
    State = 6,
    /// Malformed on-disk data.
    Format = 7,
    /// A run could not proceed.
    Experiment = 8,
    /// Underlying file-system failure.
    Io = 9,
    /// The library panicked; state may be inconsistent.
    Panic = 10,
}

/// Opaque dataset handle; create with fk_dataset_generate or
/// fk_dataset_load, release with fk_dataset_free.
pub struct FkDataset {
    _private: [u8; 0],
}

/// Opaque run-configuration handle; create with fk_config_parse or
/// fk_config_load, release with fk_config_free.
pub struct FkRunConfig {
    _private: [u8; 0],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).expect("NUL stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn status_of(err: &Error) -> FkStatus {
    match err {
        Error::Config(_) => FkStatus::Config,
        Error::Shape(_) => FkStatus::Shape,
        Error::Domain(_) => FkStatus::Domain,
        Error::State(_) => FkStatus::State,
        Error::Format { .. } => FkStatus::Format,
        Error::Experiment(_) => FkStatus::Experiment,
        Error::Io(_) => FkStatus::Io,
    }
}

fn fail(err: Error) -> FkStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Runs a body under catch_unwind, translating panics into FkStatus::Panic.
fn guarded(body: impl FnOnce() -> FkStatus) -> FkStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("panic: {msg}"));
            FkStatus::Panic
        }
    }
}

fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, FkStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(FkStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        FkStatus::InvalidUtf8
    })
}

fn dataset_ref<'a>(ptr: *const FkDataset) -> Result<&'a Dataset, FkStatus> {
    if ptr.is_null() {
        set_error("dataset handle is null");
        return Err(FkStatus::NullArgument);
    }
    Ok(unsafe { &*(ptr as *const Dataset) })
}

fn config_ref<'a>(ptr: *const FkRunConfig) -> Result<&'a RunConfig, FkStatus> {
    if ptr.is_null() {
        set_error("config handle is null");
        return Err(FkStatus::NullArgument);
    }
    Ok(unsafe { &*(ptr as *const RunConfig) })
}

fn out_slot<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, FkStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(FkStatus::NullArgument);
    }
    Ok(unsafe { &mut *ptr })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap` > 0) and returns the full message
/// length in bytes, excluding the terminator. Call with a null `buf` or
/// zero `cap` to size a buffer.
#[no_mangle]
pub extern "C" fn fk_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Generates a synthetic spectrogram dataset; see the dataset generator's
/// contract for parameter meanings.
#[no_mangle]
pub extern "C" fn fk_dataset_generate(
    n_per_class: usize,
    n_classes: usize,
    n_mels: usize,
    n_frames: usize,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut FkDataset,
) -> FkStatus {
    guarded(|| {
        let slot = match out_slot(out, "out dataset") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match gen_synthetic(n_per_class, n_classes, n_mels, n_frames, noise_sigma, seed) {
            Ok(ds) => {
                *slot = Box::into_raw(Box::new(ds)) as *mut FkDataset;
                FkStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a dataset file written by fk_dataset_save or the CLI.
#[no_mangle]
pub extern "C" fn fk_dataset_load(path: *const c_char, out: *mut *mut FkDataset) -> FkStatus {
    guarded(|| {
        let (path, slot) = match (utf8_arg(path, "path"), out_slot(out, "out dataset")) {
            (Ok(p), Ok(s)) => (p, s),
            (Err(status), _) | (_, Err(status)) => return status,
        };
        match load_dataset(Path::new(path)) {
            Ok(ds) => {
                *slot = Box::into_raw(Box::new(ds)) as *mut FkDataset;
                FkStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the dataset to `path` in the binary dataset format.
#[no_mangle]
pub extern "C" fn fk_dataset_save(ds: *const FkDataset, path: *const c_char) -> FkStatus {
    guarded(|| {
        let (ds, path) = match (dataset_ref(ds), utf8_arg(path, "path")) {
            (Ok(d), Ok(p)) => (d, p),
            (Err(status), _) | (_, Err(status)) => return status,
        };
        match save_dataset(ds, Path::new(path)) {
            Ok(()) => FkStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Reports example count, class count, and feature geometry.
#[no_mangle]
pub extern "C" fn fk_dataset_info(
    ds: *const FkDataset,
    out_len: *mut usize,
    out_classes: *mut usize,
    out_mels: *mut usize,
    out_frames: *mut usize,
) -> FkStatus {
    guarded(|| {
        let ds = match dataset_ref(ds) {
            Ok(d) => d,
            Err(status) => return status,
        };
        for (ptr, value) in [
            (out_len, ds.len()),
            (out_classes, ds.n_classes),
            (out_mels, ds.n_mels),
            (out_frames, ds.n_frames),
        ] {
            match out_slot(ptr, "info out parameter") {
                Ok(slot) => *slot = value,
                Err(status) => return status,
            }
        }
        FkStatus::Ok
    })
}

/// Releases a dataset handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn fk_dataset_free(ds: *mut FkDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds as *mut Dataset) });
    }
}

/// Parses run-configuration text (same `key = value` format as config
/// files) into a handle.
#[no_mangle]
pub extern "C" fn fk_config_parse(text: *const c_char, out: *mut *mut FkRunConfig) -> FkStatus {
    guarded(|| {
        let (text, slot) = match (utf8_arg(text, "config text"), out_slot(out, "out config")) {
            (Ok(t), Ok(s)) => (t, s),
            (Err(status), _) | (_, Err(status)) => return status,
        };
        match parse_config_str(text) {
            Ok(cfg) => {
                *slot = Box::into_raw(Box::new(cfg)) as *mut FkRunConfig;
                FkStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Reads and parses a configuration file.
#[no_mangle]
pub extern "C" fn fk_config_load(path: *const c_char, out: *mut *mut FkRunConfig) -> FkStatus {
    guarded(|| {
        let (path, slot) = match (utf8_arg(path, "path"), out_slot(out, "out config")) {
            (Ok(p), Ok(s)) => (p, s),
            (Err(status), _) | (_, Err(status)) => return status,
        };
        match fedkws::config::load_config(Path::new(path)) {
            Ok(cfg) => {
                *slot = Box::into_raw(Box::new(cfg)) as *mut FkRunConfig;
                FkStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a configuration handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn fk_config_free(cfg: *mut FkRunConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg as *mut RunConfig) });
    }
}

/// Runs the configured experiment: loads the dataset named by the config,
/// holds out the evaluation split, trains, and writes the round CSV. On
/// success stores the final test accuracy in `out_final_accuracy`.
#[no_mangle]
pub extern "C" fn fk_run(cfg: *const FkRunConfig, out_final_accuracy: *mut f64) -> FkStatus {
    guarded(|| {
        let (cfg, slot) = match (config_ref(cfg), out_slot(out_final_accuracy, "out accuracy")) {
            (Ok(c), Ok(s)) => (c, s),
            (Err(status), _) | (_, Err(status)) => return status,
        };
        match execute_run(cfg, |_| {}) {
            Ok(acc) => {
                *slot = acc;
                FkStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Relative false-reject rate of the test scores against the baseline
/// scores at the given false-accept target. Scores are split into positive
/// and negative arrays per set.
#[no_mangle]
pub extern "C" fn fk_relative_frr(
    test_pos: *const f64,
    n_test_pos: usize,
    test_neg: *const f64,
    n_test_neg: usize,
    base_pos: *const f64,
    n_base_pos: usize,
    base_neg: *const f64,
    n_base_neg: usize,
    far_target: f64,
    out: *mut f64,
) -> FkStatus {
    guarded(|| {
        let slot = match out_slot(out, "out ratio") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let side = |ptr: *const f64, n: usize, what: &str| -> Result<Vec<f64>, FkStatus> {
            if n == 0 {
                return Ok(Vec::new());
            }
            if ptr.is_null() {
                set_error(&format!("{what} is null with nonzero length"));
                return Err(FkStatus::NullArgument);
            }
            Ok(unsafe { std::slice::from_raw_parts(ptr, n) }.to_vec())
        };
        let sets = (|| {
            Ok::<_, FkStatus>((
                ScoredSet {
                    positives: side(test_pos, n_test_pos, "test positives")?,
                    negatives: side(test_neg, n_test_neg, "test negatives")?,
                },
                ScoredSet {
                    positives: side(base_pos, n_base_pos, "baseline positives")?,
                    negatives: side(base_neg, n_base_neg, "baseline negatives")?,
                },
            ))
        })();
        let (test, baseline) = match sets {
            Ok(pair) => pair,
            Err(status) => return status,
        };
        match frr_at_far(&test, &baseline, far_target) {
            Ok(ratio) => {
                *slot = ratio;
                FkStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
