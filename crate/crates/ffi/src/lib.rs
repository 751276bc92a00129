//! C ABI over the promptseg library.
//!
//! Objects are opaque handles created by `psg_*_new`/`load`/`train`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`PsgStatus`]; on failure a description is available from
//! [`psg_last_error_message`] on the same thread. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use promptseg::checkpoint;
use promptseg::config::RunConfig;
use promptseg::data::generate_dataset;
use promptseg::encoders::Image;
use promptseg::eval::{evaluate, predict, EvalSource};
use promptseg::model::Model;
use promptseg::params::ParamStore;
use promptseg::train::train;
use promptseg::Error;

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Run configuration handle.
pub struct PsgConfig {
    inner: RunConfig,
}

/// Trained model handle: configuration, architecture and parameters.
pub struct PsgModel {
    config: RunConfig,
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> PsgStatus {
    match e {
        Error::Config { .. } | Error::UnknownVariant { .. } | Error::InfeasibleSpec(_) => {
            PsgStatus::Config
        }
        Error::NonFiniteLoss { .. } => PsgStatus::Numeric,
        Error::Io(_) | Error::Json(_) | Error::MissingArtifact(_) => PsgStatus::Io,
        Error::Checkpoint(_) | Error::MissingParam(_) => PsgStatus::Checkpoint,
        _ => PsgStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PsgStatus, String)>) -> PsgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PsgStatus::Panic
        }
    }
}

fn lib(e: Error) -> (PsgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PsgStatus, String) {
    (PsgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PsgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PsgStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PsgStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (PsgStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the most recent failure on this thread, or null. The
/// pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn psg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn psg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library.
#[no_mangle]
pub unsafe extern "C" fn psg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a configuration with default values.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_config_new(out: *mut *mut PsgConfig) -> PsgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(PsgConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a TOML configuration on top of the defaults.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_config_from_toml(
    toml: *const c_char,
    out: *mut *mut PsgConfig,
) -> PsgStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let out = out_arg(out, "out")?;
        let inner = RunConfig::from_toml_str(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(PsgConfig { inner }));
        Ok(())
    })
}

/// Applies one `key=value` override.
///
/// # Safety
/// `cfg` must be a live handle and `assignment` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn psg_config_set(cfg: *mut PsgConfig, assignment: *const c_char) -> PsgStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        let a = str_arg(assignment, "assignment")?;
        let mut next = cfg.inner.clone();
        next.set(a).map_err(lib)?;
        next.validate().map_err(lib)?;
        cfg.inner = next;
        Ok(())
    })
}

/// Renders the configuration as TOML; free the result with
/// [`psg_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_config_to_toml(cfg: *const PsgConfig, out: *mut *mut c_char) -> PsgStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        *out = CString::new(cfg.inner.to_toml())
            .expect("toml has no nul")
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psg_config_free(cfg: *mut PsgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains on the synthetic dataset described by `cfg`. `out_dir` may be
/// null to skip writing a run directory.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` null or a nul-terminated string,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_train(
    cfg: *const PsgConfig,
    out_dir: *const c_char,
    out: *mut *mut PsgModel,
) -> PsgStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(str_arg(out_dir, "out_dir")?)
        };
        let out = out_arg(out, "out")?;
        let data = generate_dataset(&cfg.inner.dataset_spec()).map_err(lib)?;
        let r = train(&cfg.inner, &data, dir.map(Path::new)).map_err(lib)?;
        *out = Box::into_raw(Box::new(PsgModel {
            config: cfg.inner.clone(),
            model: r.model,
            store: r.store,
        }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_model_load(path: *const c_char, out: *mut *mut PsgModel) -> PsgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ck = checkpoint::load(Path::new(path)).map_err(lib)?;
        let model = ck.model().map_err(lib)?;
        *out = Box::into_raw(Box::new(PsgModel {
            config: ck.config,
            model,
            store: ck.store,
        }));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn psg_model_save(model: *const PsgModel, path: *const c_char) -> PsgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        checkpoint::save(Path::new(path), &m.config, &m.store, m.config.train.steps).map_err(lib)
    })
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_model_num_classes(model: *const PsgModel, out: *mut usize) -> PsgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.model.cfg.num_classes;
        Ok(())
    })
}

/// mIoU on a split (`"train"` or `"val"`) of the model's own synthetic
/// dataset. `raw_alignment` selects the alignment-map argmax instead of
/// the decoder.
///
/// # Safety
/// `model` must be a live handle, `split` a nul-terminated string and
/// `miou` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psg_model_evaluate(
    model: *const PsgModel,
    split: *const c_char,
    raw_alignment: bool,
    miou: *mut f64,
) -> PsgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let split = str_arg(split, "split")?;
        let miou = out_arg(miou, "miou")?;
        let data = generate_dataset(&m.config.dataset_spec()).map_err(lib)?;
        let samples = data.split(split).map_err(lib)?;
        let source = if raw_alignment {
            EvalSource::RawAlignment
        } else {
            EvalSource::Decoder
        };
        let r = evaluate(
            &m.model,
            &m.store,
            samples,
            split,
            source,
            m.config.train.eval_batch_size,
        )
        .map_err(lib)?;
        *miou = r.miou;
        Ok(())
    })
}

/// Segments one image. `rgb` holds `height * width * 3` values in
/// row-major, channel-last order; `labels` receives `height * width`
/// class indices.
///
/// # Safety
/// `model` must be a live handle and the buffers must have the stated
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn psg_model_predict(
    model: *const PsgModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> PsgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let n = height
            .checked_mul(width)
            .ok_or((PsgStatus::InvalidArgument, "image size overflows".to_string()))?;
        let pixels = std::slice::from_raw_parts(rgb, n * 3).to_vec();
        let img = Image::new(height, width, pixels).map_err(lib)?;
        let pred = predict(&m.model, &m.store, &[&img], EvalSource::Decoder).map_err(lib)?;
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&pred[0]);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psg_model_free(model: *mut PsgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
