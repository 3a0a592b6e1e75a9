//! C interface to the depth network.
//!
//! Models are opaque `GlpModel` handles created by [`glp_model_new`] or
//! [`glp_model_load`] and released with [`glp_model_free`]. Every fallible
//! call returns a [`GlpStatus`]; on failure the message is available from
//! [`glp_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use glpdepth::data::{checkpoint, DepthSample};
use glpdepth::train::predict_sample;
use glpdepth::{Error, GlpDepth, RunConfig};

/// Opaque model handle.
pub struct GlpModel {
    inner: GlpDepth,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Checksum = 6,
    CheckpointMismatch = 7,
    Geometry = 8,
    Numeric = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GlpStatus {
    match e {
        Error::Dimension { .. } | Error::Geometry(_) => GlpStatus::Geometry,
        Error::Domain(_) | Error::NonFiniteLoss { .. } => GlpStatus::Numeric,
        Error::Contract(_) => GlpStatus::InvalidArgument,
        Error::Config(_) => GlpStatus::Config,
        Error::Parse { .. } => GlpStatus::Parse,
        Error::Crc { .. } => GlpStatus::Checksum,
        Error::CheckpointMismatch(_) => GlpStatus::CheckpointMismatch,
        Error::Io { .. } => GlpStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GlpStatus, String)>) -> GlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GlpStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (GlpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GlpStatus, String) {
    (GlpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GlpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GlpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const GlpModel) -> Result<&'a GlpModel, (GlpStatus, String)> {
    p.as_ref().ok_or_else(|| null("model"))
}

fn emit(out: *mut *mut GlpModel, model: GlpDepth) -> Result<(), (GlpStatus, String)> {
    let boxed = Box::into_raw(Box::new(GlpModel { inner: model }));
    // SAFETY: checked non-null by the caller of emit
    unsafe { *out = boxed };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn glp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialized model from `key = value` config text.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glp_model_new(config: *const c_char, seed: u64, out: *mut *mut GlpModel) -> GlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(config, "config")?;
        let cfg = RunConfig::parse(text).map_err(lib_err)?;
        let model = GlpDepth::new(cfg.model, seed).map_err(lib_err)?;
        emit(out, model)
    })
}

/// Loads a checkpoint written by the CLI or [`glp_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glp_model_load(path: *const c_char, out: *mut *mut GlpModel) -> GlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let model = checkpoint::load_model(Path::new(path)).map_err(lib_err)?;
        emit(out, model)
    })
}

/// Writes the model weights (no optimizer state).
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn glp_model_save(model: *const GlpModel, path: *const c_char) -> GlpStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = str_arg(path, "path")?;
        checkpoint::save(Path::new(path), &m.inner, None).map_err(lib_err)
    })
}

/// Trainable parameter counts of the encoder and decoder.
///
/// # Safety
/// `model` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn glp_model_param_counts(
    model: *const GlpModel,
    encoder: *mut u64,
    decoder: *mut u64,
) -> GlpStatus {
    guard(|| {
        let m = model_arg(model)?;
        if encoder.is_null() || decoder.is_null() {
            return Err(null("count output"));
        }
        let c = m.inner.param_count();
        *encoder = c.encoder as u64;
        *decoder = c.decoder as u64;
        Ok(())
    })
}

/// Predicts metric depth for one image.
///
/// `rgb` is row-major `height × width × 3` in `[0, 1]`; `depth` receives
/// `height × width` meters. Sizes off the 32-pixel grid are resized for
/// inference and the result resized back.
///
/// # Safety
/// `rgb` must hold `3·height·width` floats and `depth` room for
/// `height·width`.
#[no_mangle]
pub unsafe extern "C" fn glp_model_predict(
    model: *const GlpModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    depth: *mut f32,
) -> GlpStatus {
    guard(|| {
        let m = model_arg(model)?;
        if rgb.is_null() || depth.is_null() {
            return Err(null("image buffer"));
        }
        if height == 0 || width == 0 {
            return Err((GlpStatus::InvalidArgument, "empty image".into()));
        }
        let n = height
            .checked_mul(width)
            .ok_or((GlpStatus::InvalidArgument, "image too large".into()))?;
        let pixels = std::slice::from_raw_parts(rgb, n * 3).to_vec();
        let sample = DepthSample::new(height, width, pixels, vec![0.0; n]).map_err(lib_err)?;
        let pred = predict_sample(&m.inner, &sample, true).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(depth, n).copy_from_slice(&pred);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn glp_model_free(model: *mut GlpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
