//! C ABI over `croft-core`.
//!
//! Every fallible function returns a [`CroftStatus`]; on failure the message is
//! available from [`croft_last_error`] on the same thread. Objects are opaque
//! handles created by `*_read` / `*_load` / `croft_train` and released with the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use croft_core::eval::{self, DetectionScores};
use croft_core::features::{read_feature_set, write_feature_set};
use croft_core::trainer::{self, load_checkpoint, save_checkpoint};
use croft_core::{Checkpoint, CroftError, FeatureSet, TrainConfig};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CroftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Frozen image/text features of one population.
pub struct CroftFeatureSet(FeatureSet);

/// Trained adapters, generator and history.
pub struct CroftCheckpoint(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &CroftError) -> CroftStatus {
    match err {
        CroftError::Io { .. } => CroftStatus::Io,
        CroftError::Format(_) | CroftError::Truncated { .. } | CroftError::Manifest(_) => CroftStatus::Format,
        e if e.is_numerical() => CroftStatus::Numerical,
        _ => CroftStatus::Validation,
    }
}

struct Failure(CroftStatus, String);

impl From<CroftError> for Failure {
    fn from(e: CroftError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CroftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CroftStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CroftStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CroftStatus::NullPointer, format!("{what} is null"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(CroftStatus::InvalidString, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(values: &[f64], out: *mut f64, capacity: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if capacity < values.len() {
        return Err(Failure(
            CroftStatus::BufferTooSmall,
            format!("output buffer holds {capacity} values, need {}", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn croft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn croft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a CFT1 file pair (`<path>.cft1` + `<path>.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn croft_feature_set_read(path: *const c_char, out: *mut *mut CroftFeatureSet) -> CroftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let fs = read_feature_set(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(CroftFeatureSet(fs)));
        Ok(())
    })
}

/// Writes a CFT1 file pair.
///
/// # Safety
/// `fs` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn croft_feature_set_write(fs: *const CroftFeatureSet, path: *const c_char) -> CroftStatus {
    guard(|| {
        let fs = get(fs, "feature set")?;
        write_feature_set(&fs.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Rows, feature dimension and number of classes.
///
/// # Safety
/// `fs` must come from this library; the out pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn croft_feature_set_shape(
    fs: *const CroftFeatureSet,
    n: *mut usize,
    d: *mut usize,
    k: *mut usize,
) -> CroftStatus {
    guard(|| {
        let fs = &get(fs, "feature set")?.0;
        for (p, v) in [(n, fs.n()), (d, fs.d()), (k, fs.k())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `fs` must come from this library (or be NULL) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn croft_feature_set_free(fs: *mut CroftFeatureSet) {
    if !fs.is_null() {
        drop(Box::from_raw(fs));
    }
}

/// Trains adapters on `data`. `config_json` is a JSON object of training options
/// (unknown keys are rejected) or NULL for the defaults.
///
/// # Safety
/// `data` must come from this library, `config_json` must be NULL or NUL-terminated,
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn croft_train(
    data: *const CroftFeatureSet,
    config_json: *const c_char,
    out: *mut *mut CroftCheckpoint,
) -> CroftStatus {
    guard(|| {
        let data = get(data, "feature set")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Failure(CroftStatus::InvalidString, "config is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Failure(CroftStatus::Validation, format!("config: {e}")))?
        };
        let ck = trainer::train(&data.0, &cfg)?;
        *out = Box::into_raw(Box::new(CroftCheckpoint(ck)));
        Ok(())
    })
}

/// Loads `<base>.json` + `<base>.bin`.
///
/// # Safety
/// `base` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn croft_checkpoint_load(base: *const c_char, out: *mut *mut CroftCheckpoint) -> CroftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(&path_arg(base, "base")?)?;
        *out = Box::into_raw(Box::new(CroftCheckpoint(ck)));
        Ok(())
    })
}

/// Writes `<base>.json` + `<base>.bin`.
///
/// # Safety
/// `ck` must come from this library; `base` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn croft_checkpoint_save(ck: *const CroftCheckpoint, base: *const c_char) -> CroftStatus {
    guard(|| {
        let ck = get(ck, "checkpoint")?;
        save_checkpoint(&ck.0, &path_arg(base, "base")?)?;
        Ok(())
    })
}

/// Adapter dimension `d`, or 0 for NULL.
///
/// # Safety
/// `ck` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn croft_checkpoint_dim(ck: *const CroftCheckpoint) -> usize {
    ck.as_ref().map_or(0, |c| c.0.params.d())
}

/// # Safety
/// `ck` must come from this library (or be NULL) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn croft_checkpoint_free(ck: *mut CroftCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Per-row energy scores of `fs` under the adapters; writes `n` values into `out`.
///
/// # Safety
/// Handles must come from this library; `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn croft_energy_scores(
    ck: *const CroftCheckpoint,
    fs: *const CroftFeatureSet,
    out: *mut f64,
    capacity: usize,
) -> CroftStatus {
    guard(|| {
        let ck = get(ck, "checkpoint")?;
        let fs = &get(fs, "feature set")?.0;
        let e = eval::energy_detector(fs.image_features.view(), fs.text_features.view(), &ck.0.params)?;
        write_out(&e.to_vec(), out, capacity)
    })
}

/// Closed-set accuracy in `[0, 1]` of a labelled feature set.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn croft_accuracy(
    ck: *const CroftCheckpoint,
    fs: *const CroftFeatureSet,
    out: *mut f64,
) -> CroftStatus {
    guard(|| {
        let ck = get(ck, "checkpoint")?;
        let fs = &get(fs, "feature set")?.0;
        let labels = fs.class_labels()?;
        let acc = eval::classify_accuracy(fs.image_features.view(), fs.text_features.view(), &labels, &ck.0.params)?;
        write_out(&[acc], out, 1)
    })
}

unsafe fn detection(
    closed: *const f64,
    n_closed: usize,
    open: *const f64,
    n_open: usize,
) -> Result<DetectionScores, Failure> {
    let c = slice_arg(closed, n_closed, "closed scores")?;
    let o = slice_arg(open, n_open, "open scores")?;
    Ok(DetectionScores::new(c.to_vec(), o.to_vec())?)
}

/// AUROC of open-set vs closed-set scores (higher score = more out-of-distribution).
///
/// # Safety
/// `closed` / `open` must point to `n_closed` / `n_open` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn croft_auroc(
    closed: *const f64,
    n_closed: usize,
    open: *const f64,
    n_open: usize,
    out: *mut f64,
) -> CroftStatus {
    guard(|| {
        let ds = detection(closed, n_closed, open, n_open)?;
        write_out(&[eval::auroc(&ds)?], out, 1)
    })
}

/// Fraction of open-set scores at or below the 95th percentile of closed-set scores.
///
/// # Safety
/// As for [`croft_auroc`].
#[no_mangle]
pub unsafe extern "C" fn croft_fpr95(
    closed: *const f64,
    n_closed: usize,
    open: *const f64,
    n_open: usize,
    out: *mut f64,
) -> CroftStatus {
    guard(|| {
        let ds = detection(closed, n_closed, open, n_open)?;
        write_out(&[eval::fpr95(&ds)?], out, 1)
    })
}
