//! C ABI over the `spade` crate.
//!
//! Every function returns a [`SpadeStatus`]; on failure the message is
//! available from [`spade_last_error`] on the same thread. Models are
//! opaque handles created by `spade_model_*` constructors and released
//! with [`spade_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use spade::cli::RunConfig;
use spade::model::{load_checkpoint, save_checkpoint, Mode, Targets};
use spade::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpadeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Resource = 5,
    Checkpoint = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Other = 9,
}

/// Opaque single-precision model.
pub struct SpadeModel {
    inner: spade::model::SpadeModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nuls removed"));
}

fn status_of(e: &Error) -> SpadeStatus {
    match e {
        Error::Config { .. } => SpadeStatus::Config,
        Error::InvalidArgument(_) | Error::OutOfVocab { .. } | Error::Shape { .. } => SpadeStatus::InvalidArgument,
        Error::Singular { .. } | Error::Unstable(_) | Error::NonFiniteLoss { .. } => SpadeStatus::Numeric,
        Error::Io(_) | Error::OutOfMemory { .. } | Error::CorpusTooShort { .. } => SpadeStatus::Resource,
        Error::Checkpoint(_) => SpadeStatus::Checkpoint,
        _ => SpadeStatus::Other,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (SpadeStatus, String)>) -> SpadeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpadeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SpadeStatus::Panic
        }
    }
}

fn lift(e: Error) -> (SpadeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SpadeStatus, String) {
    (SpadeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SpadeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpadeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SpadeModel) -> Result<&'a SpadeModel, (SpadeStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn spade_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spade_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model from INI text using the same
/// `[model]` keys and `[run] seed` as the command line. `config` may be
/// empty for all defaults.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spade_model_from_config(config: *const c_char, out: *mut *mut SpadeModel) -> SpadeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = read_str(config, "config")?;
        let mut cfg = RunConfig::from_ini(text).map_err(lift)?;
        cfg.finalize().map_err(lift)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.seed = cfg.seed;
        let inner = spade::model::SpadeModel::new(model_cfg).map_err(lift)?;
        *out = Box::into_raw(Box::new(SpadeModel { inner }));
        Ok(())
    })
}

/// Loads a `.spade` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spade_model_load(path: *const c_char, out: *mut *mut SpadeModel) -> SpadeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let inner = load_checkpoint(path).map_err(lift)?;
        *out = Box::into_raw(Box::new(SpadeModel { inner }));
        Ok(())
    })
}

/// Writes the model as a `.spade` checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spade_model_save(model: *const SpadeModel, path: *const c_char) -> SpadeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = read_str(path, "path")?;
        save_checkpoint(&m.inner, path).map_err(lift)
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spade_model_free(model: *mut SpadeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, width and depth of the model.
///
/// # Safety
/// `model` must come from this library; any output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn spade_model_shape(
    model: *const SpadeModel,
    vocab: *mut usize,
    d: *mut usize,
    depth: *mut usize,
) -> SpadeStatus {
    guard(|| {
        let c = model_ref(model)?.inner.config();
        for (p, v) in [(vocab, c.vocab), (d, c.d), (depth, c.depth)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Total and trainable scalar parameter counts.
///
/// # Safety
/// `model` must come from this library; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn spade_model_param_count(
    model: *const SpadeModel,
    total: *mut usize,
    trainable: *mut usize,
) -> SpadeStatus {
    guard(|| {
        let p = model_ref(model)?.inner.params();
        if let Some(t) = total.as_mut() {
            *t = p.total_count();
        }
        if let Some(t) = trainable.as_mut() {
            *t = p.trainable_count();
        }
        Ok(())
    })
}

/// Next-token logits for `len` tokens, written row-major into `logits`
/// (`len × vocab` floats). `capacity` is the buffer length in floats; if it
/// is too small nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `tokens` must point to `len` values and `logits` to `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn spade_model_logits(
    model: *const SpadeModel,
    tokens: *const u32,
    len: usize,
    logits: *mut f32,
    capacity: usize,
) -> SpadeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let need = len * m.inner.config().vocab;
        if capacity < need {
            return Err((SpadeStatus::BufferTooSmall, format!("need {need} floats, buffer holds {capacity}")));
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect();
        let out = m.inner.forward(&ids, Mode::Lm).map_err(lift)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(out.data());
        Ok(())
    })
}

/// Mean next-token cross-entropy (nats) of a token sequence, predicting
/// `tokens[1..]` from `tokens[..len-1]`.
///
/// # Safety
/// `tokens` must point to `len` values and `loss` to one double.
#[no_mangle]
pub unsafe extern "C" fn spade_model_sequence_loss(
    model: *const SpadeModel,
    tokens: *const u32,
    len: usize,
    loss: *mut f64,
) -> SpadeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if loss.is_null() {
            return Err(null("loss"));
        }
        if len < 2 {
            return Err((SpadeStatus::InvalidArgument, "need at least two tokens".into()));
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect();
        let mut targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
        targets.push(None);
        *loss = m.inner.loss(&ids, &Targets::Tokens(targets)).map_err(lift)?;
        Ok(())
    })
}

/// Runs the command-line front end in-process and returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn spade_run_cli(argc: usize, argv: *const *const c_char) -> i32 {
    if argv.is_null() {
        set_error("argv is null");
        return 2;
    }
    let args: Vec<String> = (0..argc)
        .map(|i| {
            let p = *argv.add(i);
            if p.is_null() {
                String::new()
            } else {
                CStr::from_ptr(p).to_string_lossy().into_owned()
            }
        })
        .collect();
    catch_unwind(|| spade::cli::run(args)).unwrap_or(1)
}
