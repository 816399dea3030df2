//! C ABI over the `mfdelay` library.
//!
//! Every function returns an [`MfdStatus`]. On failure the message of the
//! last error on the calling thread is available from
//! [`mfd_last_error`]. Handles are opaque and must be released with the
//! matching `_free` function. Panics never cross the boundary; they are
//! reported as [`MfdStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use mfdelay::forward::{evaluate_cost, simulate, Ensemble};
use mfdelay::harness::{parse_configs, run_pipeline, ExperimentConfig, Pipeline, RunOptions};
use mfdelay::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Dimension = 4,
    Argument = 5,
    Evaluation = 6,
    Divergence = 7,
    RankDeficient = 8,
    Unsupported = 9,
    Fit = 10,
    Io = 11,
    Json = 12,
    OutOfRange = 13,
    BufferTooSmall = 14,
    Panic = 15,
}

impl From<&Error> for MfdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => MfdStatus::Dimension,
            Error::Argument(_) => MfdStatus::Argument,
            Error::Evaluation { .. } => MfdStatus::Evaluation,
            Error::Divergence { .. } => MfdStatus::Divergence,
            Error::RankDeficient { .. } => MfdStatus::RankDeficient,
            Error::Unsupported(_) => MfdStatus::Unsupported,
            Error::Config(_) => MfdStatus::Config,
            Error::Fit(_) => MfdStatus::Fit,
            Error::Io(_) => MfdStatus::Io,
            Error::Json(_) => MfdStatus::Json,
        }
    }
}

/// One parsed and validated experiment.
pub struct MfdExperiment {
    cfg: ExperimentConfig,
}

/// A simulated particle ensemble together with its cost estimate.
pub struct MfdEnsemble {
    ens: Arc<Ensemble>,
    cost: (f64, f64),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Fail(MfdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(MfdStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfdStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MfdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MfdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MfdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if s.len() + 1 > len {
        return Err(Fail(
            MfdStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, {} needed", s.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mfd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of experiments in a JSON configuration document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfd_config_count(json: *const c_char, out: *mut usize) -> MfdStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = parse_configs(text)?.len();
        Ok(())
    })
}

/// Parses experiment `index` of a JSON configuration document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a handle to release with [`mfd_experiment_free`].
#[no_mangle]
pub unsafe extern "C" fn mfd_experiment_from_json(
    json: *const c_char,
    index: usize,
    out: *mut *mut MfdExperiment,
) -> MfdStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut list = parse_configs(text)?;
        if index >= list.len() {
            return Err(Fail(
                MfdStatus::OutOfRange,
                format!("experiment {index} requested, {} present", list.len()),
            ));
        }
        let cfg = list.swap_remove(index);
        *out = Box::into_raw(Box::new(MfdExperiment { cfg }));
        Ok(())
    })
}

/// Releases an experiment handle. Null is ignored.
///
/// # Safety
/// `exp` must come from [`mfd_experiment_from_json`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mfd_experiment_free(exp: *mut MfdExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Writes the configuration digest (64 hex digits and a NUL) into `buf`.
///
/// # Safety
/// `exp` must be a live handle and `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mfd_experiment_digest(exp: *const MfdExperiment, buf: *mut c_char, len: usize) -> MfdStatus {
    guard(|| {
        let e = exp.as_ref().ok_or_else(|| null("experiment"))?;
        copy_str(&e.cfg.digest(), buf, len)
    })
}

/// Overrides the seed of an experiment.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mfd_experiment_set_seed(exp: *mut MfdExperiment, seed: u64) -> MfdStatus {
    guard(|| {
        let e = exp.as_mut().ok_or_else(|| null("experiment"))?;
        e.cfg.seed = seed;
        Ok(())
    })
}

/// Simulates the experiment's reference control.
///
/// # Safety
/// `exp` must be a live handle and `out` a valid pointer. On success `*out`
/// owns a handle to release with [`mfd_ensemble_free`].
#[no_mangle]
pub unsafe extern "C" fn mfd_simulate(exp: *const MfdExperiment, out: *mut *mut MfdEnsemble) -> MfdStatus {
    guard(|| {
        let e = exp.as_ref().ok_or_else(|| null("experiment"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inst = e.cfg.instance(None)?;
        let ens = simulate(&inst.lc, &inst.xi, &inst.time, &inst.control, &inst.noise)?;
        let j = evaluate_cost(&inst.lc, &ens);
        *out = Box::into_raw(Box::new(MfdEnsemble {
            ens,
            cost: (j.mean, j.stderr),
        }));
        Ok(())
    })
}

/// Releases an ensemble handle. Null is ignored.
///
/// # Safety
/// `ens` must come from [`mfd_simulate`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mfd_ensemble_free(ens: *mut MfdEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Number of particles, time steps and state components.
///
/// # Safety
/// `ens` must be a live handle; each output pointer must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mfd_ensemble_shape(
    ens: *const MfdEnsemble,
    particles: *mut usize,
    steps: *mut usize,
    n: *mut usize,
) -> MfdStatus {
    guard(|| {
        let e = ens.as_ref().ok_or_else(|| null("ensemble"))?;
        if let Some(p) = particles.as_mut() {
            *p = e.ens.particles();
        }
        if let Some(s) = steps.as_mut() {
            *s = e.ens.steps();
        }
        if let Some(v) = n.as_mut() {
            *v = e.ens.grid.n();
        }
        Ok(())
    })
}

/// Copies the mean head path, `(steps + 1) * n` values in step-major order.
///
/// # Safety
/// `ens` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfd_ensemble_mean_path(ens: *const MfdEnsemble, out: *mut f64, len: usize) -> MfdStatus {
    guard(|| {
        let e = ens.as_ref().ok_or_else(|| null("ensemble"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let flat: Vec<f64> = e.ens.mean_path().into_iter().flatten().collect();
        if len < flat.len() {
            return Err(Fail(
                MfdStatus::BufferTooSmall,
                format!("buffer holds {len} values, {} needed", flat.len()),
            ));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), out, flat.len());
        Ok(())
    })
}

/// Copies the head path of one particle, `(steps + 1) * n` values.
///
/// # Safety
/// `ens` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfd_ensemble_particle_path(
    ens: *const MfdEnsemble,
    particle: usize,
    out: *mut f64,
    len: usize,
) -> MfdStatus {
    guard(|| {
        let e = ens.as_ref().ok_or_else(|| null("ensemble"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if particle >= e.ens.particles() {
            return Err(Fail(MfdStatus::OutOfRange, format!("no particle {particle}")));
        }
        let n = e.ens.grid.n();
        let need = (e.ens.steps() + 1) * n;
        if len < need {
            return Err(Fail(
                MfdStatus::BufferTooSmall,
                format!("buffer holds {len} values, {need} needed"),
            ));
        }
        for k in 0..=e.ens.steps() {
            ptr::copy_nonoverlapping(e.ens.head(particle, k).as_ptr(), out.add(k * n), n);
        }
        Ok(())
    })
}

/// Monte Carlo estimate of the cost and its standard error.
///
/// # Safety
/// `ens` must be a live handle; `mean` and `stderr` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mfd_ensemble_cost(ens: *const MfdEnsemble, mean: *mut f64, stderr: *mut f64) -> MfdStatus {
    guard(|| {
        let e = ens.as_ref().ok_or_else(|| null("ensemble"))?;
        if mean.is_null() || stderr.is_null() {
            return Err(null("output"));
        }
        *mean = e.cost.0;
        *stderr = e.cost.1;
        Ok(())
    })
}

/// Runs a named pipeline (`simulate`, `orders`, `adjoint`, `duality`,
/// `tensor`, `smp-check`, `cost-expansion`) and returns its records as a
/// JSON array. `*pass` is 1 when every record passes.
///
/// # Safety
/// `exp` must be a live handle, `pipeline` a NUL-terminated string and
/// `json_out`, `pass` valid pointers. `*json_out` must be released with
/// [`mfd_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mfd_run_pipeline(
    exp: *const MfdExperiment,
    pipeline: *const c_char,
    json_out: *mut *mut c_char,
    pass: *mut i32,
) -> MfdStatus {
    guard(|| {
        let e = exp.as_ref().ok_or_else(|| null("experiment"))?;
        let name = str_arg(pipeline, "pipeline")?;
        if json_out.is_null() || pass.is_null() {
            return Err(null("output"));
        }
        let p: Pipeline = serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Fail(MfdStatus::Argument, format!("unknown pipeline `{name}`")))?;
        let out = run_pipeline(&e.cfg, p, &RunOptions::default())?;
        let text = serde_json::to_string(&out.records).map_err(|e| Fail(MfdStatus::Json, e.to_string()))?;
        let c = CString::new(text).map_err(|_| Fail(MfdStatus::Json, "report contains NUL".into()))?;
        *pass = i32::from(out.pass());
        *json_out = c.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mfd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
