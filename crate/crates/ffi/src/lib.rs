//! C ABI over the `shrink` library.
//!
//! Every entry point returns a [`ShrinkStatus`]. On failure the message is
//! available from [`shrink_last_error`] on the same thread. Models are opaque
//! [`ShrinkModel`] handles released with [`shrink_model_free`]; strings
//! returned to the caller are released with [`shrink_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use shrink::checkpoint::{load_checkpoint, save_checkpoint};
use shrink::model::{self, ForwardOptions, ModelConfig, ParamSet};
use shrink::{trim, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    MissingFile = 4,
    Config = 5,
    InvalidInput = 6,
    Diverged = 7,
    Checkpoint = 8,
    Arch = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque model handle.
pub struct ShrinkModel {
    params: ParamSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> ShrinkStatus {
    match e {
        Error::MissingDependency(_) => ShrinkStatus::MissingFile,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ShrinkStatus::MissingFile,
        Error::Io(_) => ShrinkStatus::Io,
        Error::InvalidConfig(_) | Error::Config(_) | Error::Json(_) => ShrinkStatus::Config,
        Error::Divergence { .. } => ShrinkStatus::Diverged,
        Error::Checkpoint(_) => ShrinkStatus::Checkpoint,
        Error::ArchMismatch(_) | Error::Trim(_) => ShrinkStatus::Arch,
        Error::InvalidArgument(_) => ShrinkStatus::InvalidArgument,
        Error::TokenOutOfRange { .. }
        | Error::SequenceTooLong { .. }
        | Error::Shape(_)
        | Error::CorpusTooShort(_)
        | Error::Empty(_) => ShrinkStatus::InvalidInput,
    }
}

struct Fail(ShrinkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ShrinkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ShrinkStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ShrinkStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ShrinkStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(ShrinkStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const ShrinkModel) -> Result<&'a ShrinkModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn put_model(out: *mut *mut ShrinkModel, params: ParamSet) {
    *out = Box::into_raw(Box::new(ShrinkModel { params }));
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn shrink_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn shrink_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_load(path: *const c_char, out: *mut *mut ShrinkModel) -> ShrinkStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        put_model(out, load_checkpoint(&path)?);
        Ok(())
    })
}

/// Builds a freshly initialised model from a JSON model config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut ShrinkModel,
) -> ShrinkStatus {
    guard(|| {
        let cfg: ModelConfig = serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?;
        if out.is_null() {
            return Err(null("out"));
        }
        put_model(out, ParamSet::init(&cfg, seed)?);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_free(model: *mut ShrinkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model to `path` atomically.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_save(model: *const ShrinkModel, path: *const c_char) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        save_checkpoint(&m.params, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// The model config as JSON. Release with [`shrink_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_config_json(model: *const ShrinkModel, out: *mut *mut c_char) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&m.params.config).map_err(Error::from)?;
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn shrink_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Total and non-embedding parameter counts.
///
/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_param_counts(
    model: *const ShrinkModel,
    total: *mut u64,
    non_embedding: *mut u64,
) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        let (t, ne) = m.params.config.count_params();
        if !total.is_null() {
            *total = t as u64;
        }
        if !non_embedding.is_null() {
            *non_embedding = ne as u64;
        }
        Ok(())
    })
}

/// Vocabulary size, which is the row length of the logits.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_vocab(model: *const ShrinkModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.vocab)
}

/// Runs a forward pass over `batch * seq` token ids laid out row-major and
/// writes `batch * seq * vocab` logits to `logits`. `logits_len` is the
/// capacity of the buffer in floats.
///
/// # Safety
/// `tokens` must point to `batch * seq` ids and `logits` to `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_forward(
    model: *const ShrinkModel,
    tokens: *const u32,
    batch: usize,
    seq: usize,
    logits: *mut f32,
    logits_len: usize,
) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        let n = batch.checked_mul(seq).ok_or_else(|| Fail(ShrinkStatus::InvalidArgument, "batch * seq overflows".into()))?;
        let toks = slice_arg(tokens, n, "tokens")?;
        let need = n * m.params.config.vocab;
        if logits_len < need {
            return Err(Fail(ShrinkStatus::BufferTooSmall, format!("logits buffer holds {logits_len}, need {need}")));
        }
        if logits.is_null() && need > 0 {
            return Err(null("logits"));
        }
        let out = model::forward(&m.params, toks, batch, seq, &ForwardOptions::default())?;
        if need > 0 {
            std::slice::from_raw_parts_mut(logits, need).copy_from_slice(&out.logits);
        }
        Ok(())
    })
}

/// Log-likelihood in nats of `continuation` following `prefix`.
///
/// # Safety
/// The token pointers must cover their lengths and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_score(
    model: *const ShrinkModel,
    prefix: *const u32,
    prefix_len: usize,
    continuation: *const u32,
    continuation_len: usize,
    out: *mut f64,
) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = slice_arg(prefix, prefix_len, "prefix")?;
        let c = slice_arg(continuation, continuation_len, "continuation")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model::score_continuation(&m.params, p, c)?;
        Ok(())
    })
}

/// Removes the listed layers (0-based) and returns the shallower model as a
/// new handle.
///
/// # Safety
/// `layers` must cover `n_layers` entries and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_drop_layers(
    model: *const ShrinkModel,
    layers: *const usize,
    n_layers: usize,
    out: *mut *mut ShrinkModel,
) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        let drop = slice_arg(layers, n_layers, "layers")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, _) = trim::trim_depth(&m.params, drop)?;
        put_model(out, p);
        Ok(())
    })
}

/// Width-prunes to the JSON target config with a seeded random selection and
/// returns the result as a new handle.
///
/// # Safety
/// `target_json` must be a NUL-terminated string and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn shrink_model_random_prune(
    model: *const ShrinkModel,
    target_json: *const c_char,
    seed: u64,
    out: *mut *mut ShrinkModel,
) -> ShrinkStatus {
    guard(|| {
        let m = model_arg(model)?;
        let target: ModelConfig = serde_json::from_str(str_arg(target_json, "target_json")?).map_err(Error::from)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, _) = trim::random_prune(&m.params, &target, seed)?;
        put_model(out, p);
        Ok(())
    })
}
