//! C ABI over the `skillscope` library.
//!
//! Datasets and models are opaque heap handles created by `sk_*_load` and released with the
//! matching `sk_*_free`. Every fallible call returns an [`SkStatus`]; on failure a message is
//! available from [`sk_last_error`] on the same thread until the next failing call. Panics
//! never cross the boundary and are reported as [`SkStatus::Panic`].
//!
//! Array outputs use caller-owned buffers: the call writes at most `cap` values and stores
//! the required length in `*out_len`. A buffer that is too small yields
//! [`SkStatus::BufferTooSmall`] with `*out_len` still set.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

use skillscope::explain::{explain_global, ShapConfig};
use skillscope::globals::{global_feature_names, GlobalFeatureConfig, NUM_GLOBAL_FEATURES};
use skillscope::model::{prepare_all, prepare_session, PreparedSession};
use skillscope::session::{load_sessions, LoadOptions, SessionRecording};
use skillscope::{Dataset, Error, SkillModel};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Dataset = 6,
    Config = 7,
    Layout = 8,
    Model = 9,
    OutOfRange = 10,
    BufferTooSmall = 11,
    Panic = 12,
    Internal = 13,
}

/// Opaque handle to a loaded, validated session file.
pub struct SkDataset {
    inner: Dataset,
}

/// Opaque handle to a trained model.
pub struct SkModel {
    inner: SkillModel,
}

struct Failure {
    status: SkStatus,
    message: String,
}

impl Failure {
    fn new(status: SkStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SkStatus::Io,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => SkStatus::Parse,
            Error::Validation { .. } | Error::TooShort { .. } => SkStatus::Validation,
            Error::Dataset(_) | Error::Statistic { .. } => SkStatus::Dataset,
            Error::Config(_) => SkStatus::Config,
            Error::Layout(_) => SkStatus::Layout,
            Error::Container(_) => SkStatus::Model,
            Error::Shape { .. } => SkStatus::Internal,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SkStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure::new(SkStatus::Panic, format!("internal panic: {msg}")))
    });
    match outcome {
        Ok(()) => SkStatus::Ok,
        Err(f) => {
            set_last_error(&f.message);
            f.status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(SkStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(SkStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::new(SkStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::new(SkStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn session(ds: &SkDataset, index: usize) -> Result<&SessionRecording, Failure> {
    ds.inner.sessions().get(index).ok_or_else(|| {
        Failure::new(
            SkStatus::OutOfRange,
            format!("session index {index} out of range for {} sessions", ds.inner.len()),
        )
    })
}

fn prepared(model: &SkillModel, ds: &SkDataset, index: usize) -> Result<PreparedSession, Failure> {
    Ok(prepare_session(session(ds, index)?, &model.preprocess, &model.globals)?)
}

unsafe fn write_values(values: &[f64], out: *mut f64, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    *out_ref(out_len, "out_len")? = values.len();
    if cap < values.len() {
        return Err(Failure::new(
            SkStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", values.len()),
        ));
    }
    if out.is_null() {
        return Err(Failure::new(SkStatus::NullPointer, "output buffer is null"));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sk_version() -> *const c_char {
    static V: OnceLock<CString> = OnceLock::new();
    V.get_or_init(|| CString::new(env!("CARGO_PKG_VERSION")).expect("no NUL"))
        .as_ptr()
}

/// Message of the last failing call on this thread; empty if none. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads and validates a line-delimited session file. With `strict`, unknown fields are
/// rejected.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_load(path: *const c_char, strict: bool, out: *mut *mut SkDataset) -> SkStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let inner = load_sessions(path_arg(path)?, LoadOptions { strict })?;
        *out = Box::into_raw(Box::new(SkDataset { inner }));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from [`sk_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_free(ds: *mut SkDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_len(ds: *const SkDataset, out_len: *mut usize) -> SkStatus {
    guard(|| {
        *out_ref(out_len, "out_len")? = deref(ds, "dataset")?.inner.len();
        Ok(())
    })
}

/// Frame count of session `index`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_frame_count(ds: *const SkDataset, index: usize, out_frames: *mut usize) -> SkStatus {
    guard(|| {
        *out_ref(out_frames, "out_frames")? = session(deref(ds, "dataset")?, index)?.len();
        Ok(())
    })
}

/// Copies the id of session `index` into `buf` as a NUL-terminated string. `*out_len`
/// receives the id length in bytes, without the terminator.
///
/// # Safety
/// `buf` must hold `cap` bytes; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_session_id(
    ds: *const SkDataset,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SkStatus {
    guard(|| {
        let id = session(deref(ds, "dataset")?, index)?.session_id.as_bytes();
        *out_ref(out_len, "out_len")? = id.len();
        if cap < id.len() + 1 {
            return Err(Failure::new(
                SkStatus::BufferTooSmall,
                format!("buffer holds {cap} bytes, {} needed", id.len() + 1),
            ));
        }
        if buf.is_null() {
            return Err(Failure::new(SkStatus::NullPointer, "buf is null"));
        }
        std::ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), buf, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// Loads a saved model and checks its feature layout against this library.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sk_model_load(path: *const c_char, out: *mut *mut SkModel) -> SkStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let inner = SkillModel::load(path_arg(path)?)?;
        inner.check_layout()?;
        *out = Box::into_raw(Box::new(SkModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`sk_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sk_model_free(model: *mut SkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicted skill score in [1, 10] for session `index`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_predict(
    model: *const SkModel,
    ds: *const SkDataset,
    index: usize,
    out_score: *mut f64,
) -> SkStatus {
    guard(|| {
        let model = &deref(model, "model")?.inner;
        let s = prepared(model, deref(ds, "dataset")?, index)?;
        *out_ref(out_score, "out_score")? = model.predict(&s)?.score;
        Ok(())
    })
}

/// Per-frame importance of session `index` (one value per frame, summing to 1).
///
/// # Safety
/// `out` must hold `cap` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_temporal_importance(
    model: *const SkModel,
    ds: *const SkDataset,
    index: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> SkStatus {
    guard(|| {
        let model = &deref(model, "model")?.inner;
        let s = prepared(model, deref(ds, "dataset")?, index)?;
        write_values(&model.predict(&s)?.importance, out, cap, out_len)
    })
}

/// Number of global features (19).
#[no_mangle]
pub extern "C" fn sk_global_feature_count() -> usize {
    NUM_GLOBAL_FEATURES
}

/// Static name of global feature `i`, or null when out of range.
#[no_mangle]
pub extern "C" fn sk_global_feature_name(i: usize) -> *const c_char {
    static NAMES: OnceLock<Vec<CString>> = OnceLock::new();
    NAMES
        .get_or_init(|| {
            global_feature_names()
                .into_iter()
                .map(|n| CString::new(n).expect("no NUL"))
                .collect()
        })
        .get(i)
        .map_or(std::ptr::null(), |c| c.as_ptr())
}

/// Raw global feature vector of session `index`, computed with the model's feature
/// configuration, or the default one when `model` is null.
///
/// # Safety
/// `out` must hold `cap` doubles; `ds` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_global_features(
    model: *const SkModel,
    ds: *const SkDataset,
    index: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> SkStatus {
    guard(|| {
        let s = session(deref(ds, "dataset")?, index)?;
        let cfg = model.as_ref().map_or_else(GlobalFeatureConfig::default, |m| m.inner.globals.clone());
        let g = skillscope::globals::build_global_vector(s, &cfg)?;
        write_values(&g.values, out, cap, out_len)
    })
}

/// Sampling Shapley attribution of session `index`'s score over the global features, with
/// absent features drawn from `background`. Writes one value per feature to `out_values`;
/// `out_std_errors` and `out_base` may be null.
///
/// # Safety
/// Output buffers must hold `cap` doubles; other pointers must be valid or null where
/// allowed.
#[no_mangle]
pub unsafe extern "C" fn sk_shap(
    model: *const SkModel,
    background: *const SkDataset,
    ds: *const SkDataset,
    index: usize,
    n_samples: usize,
    seed: u64,
    out_values: *mut f64,
    out_std_errors: *mut f64,
    cap: usize,
    out_len: *mut usize,
    out_base: *mut f64,
) -> SkStatus {
    guard(|| {
        let model = &deref(model, "model")?.inner;
        let bg = &deref(background, "background")?.inner;
        let instance = prepared(model, deref(ds, "dataset")?, index)?;
        if n_samples == 0 {
            return Err(Failure::new(SkStatus::InvalidArgument, "n_samples must be at least 1"));
        }
        let bg = prepare_all(bg.sessions(), &model.preprocess, &model.globals)?;
        let a = explain_global(model, &bg, &instance, &ShapConfig { n_samples, seed })?;
        write_values(&a.values, out_values, cap, out_len)?;
        if !out_std_errors.is_null() {
            std::ptr::copy_nonoverlapping(a.std_errors.as_ptr(), out_std_errors, a.std_errors.len());
        }
        if let Some(b) = out_base.as_mut() {
            *b = a.base_value;
        }
        Ok(())
    })
}
