//! C ABI over the curvecast forecaster.
//!
//! Every function returns a status code and reports details through
//! [`cc_last_error`]. Models are opaque handles created by a load or
//! pretrain call and released with [`cc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use curvecast::config::RunConfig;
use curvecast::data::Curve;
use curvecast::engine::{pretrain, reconstruct, Model};
use curvecast::{checkpoint, Error};

/// Status codes; the non-zero values match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    Failed = 1,
    Config = 2,
    Data = 3,
    Precondition = 4,
    /// A required pointer was null or a length was inconsistent.
    InvalidArgument = 5,
    Panic = 6,
}

/// Opaque trained model.
pub struct CcModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CcStatus {
    match curvecast::cli::exit_code(e) {
        2 => CcStatus::Config,
        3 => CcStatus::Data,
        4 => CcStatus::Precondition,
        _ => CcStatus::Failed,
    }
}

fn guard<F: FnOnce() -> Result<(), (CcStatus, String)>>(f: F) -> CcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CcStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CcStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (CcStatus, String) {
    (CcStatus::InvalidArgument, msg.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (CcStatus, String)> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_arg(toml: *const c_char) -> Result<RunConfig, (CcStatus, String)> {
    if toml.is_null() {
        return Ok(RunConfig::default());
    }
    let s = CStr::from_ptr(toml)
        .to_str()
        .map_err(|_| invalid("config is not UTF-8"))?;
    RunConfig::from_toml(s).map_err(lib_err)
}

unsafe fn slice_arg<'a>(
    p: *const f64,
    len: usize,
    what: &str,
) -> Result<&'a [f64], (CcStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn store(out: *mut *mut CcModel, model: Model) {
    *out = Box::into_raw(Box::new(CcModel { model }));
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the command-line tool or [`cc_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(path: *const c_char, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let model = checkpoint::load(&path_arg(path)?).map_err(lib_err)?;
        store(out, model);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cc_model_save(model: *const CcModel, path: *const c_char) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        checkpoint::save(&m.model, &path_arg(path)?).map_err(lib_err)
    })
}

/// Pretrains on the synthetic suite described by the configuration.
/// `config_toml` may be null for the defaults.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_model_pretrain_synthetic(
    config_toml: *const c_char,
    data_seed: u64,
    out: *mut *mut CcModel,
) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let cfg = config_arg(config_toml)?;
        let curves = cfg.suite.generate(data_seed).map_err(lib_err)?;
        let (model, _) = pretrain(&curves, &cfg).map_err(lib_err)?;
        store(out, model);
        Ok(())
    })
}

/// Pretrains on caller-supplied curves stored back to back: curve `i` has
/// `lengths[i]` samples, read consecutively from `times` and `values`.
///
/// # Safety
/// `times` and `values` must each hold `Σ lengths` doubles; `lengths` must
/// hold `n_curves` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_model_pretrain(
    config_toml: *const c_char,
    times: *const f64,
    values: *const f64,
    lengths: *const usize,
    n_curves: usize,
    out: *mut *mut CcModel,
) -> CcStatus {
    guard(|| {
        if out.is_null() || lengths.is_null() {
            return Err(invalid("out or lengths is null"));
        }
        let cfg = config_arg(config_toml)?;
        let lens = std::slice::from_raw_parts(lengths, n_curves);
        let total: usize = lens.iter().sum();
        let ts = slice_arg(times, total, "times")?;
        let vs = slice_arg(values, total, "values")?;
        let mut curves = Vec::with_capacity(n_curves);
        let mut at = 0;
        for (i, &n) in lens.iter().enumerate() {
            curves.push(Curve {
                subject_id: Some(format!("C{i}")),
                timestamps: ts[at..at + n].to_vec(),
                values: vs[at..at + n].to_vec(),
            });
            at += n;
        }
        let (model, _) = pretrain(&curves, &cfg).map_err(lib_err)?;
        store(out, model);
        Ok(())
    })
}

/// Input window length of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cc_model_window(model: *const CcModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.window)
}

/// Reconstructs a curve of `total` samples from its first `observed` values.
/// Writes `total` values to `out_curve`; the first `observed` equal the prefix.
///
/// # Safety
/// `times` must hold `total` doubles, `prefix` `observed` doubles and
/// `out_curve` room for `out_len ≥ total` doubles.
#[no_mangle]
pub unsafe extern "C" fn cc_reconstruct(
    model: *const CcModel,
    times: *const f64,
    total: usize,
    prefix: *const f64,
    observed: usize,
    out_curve: *mut f64,
    out_len: usize,
) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if out_curve.is_null() || out_len < total {
            return Err(invalid("output buffer is null or shorter than total"));
        }
        let ts = slice_arg(times, total, "times")?;
        let pre = slice_arg(prefix, observed, "prefix")?;
        let r = reconstruct(&m.model, ts, pre).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out_curve, total).copy_from_slice(&r.curve);
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
