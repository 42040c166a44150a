//! C ABI over `ucos-core`.
//!
//! Handles are opaque heap objects created by `*_new`/`*_load` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`UcosStatus`]; on failure a message is available from
//! [`ucos_last_error`] on the same thread. Arrays are caller-allocated and
//! passed with their length; images are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use ucos_core::config::{ProblemConfig, ProblemKind};
use ucos_core::problem::Problem;
use ucos_core::samplers::{run_ensemble, Method, SamplingProblem, ScoreModels};
use ucos_core::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UcosStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Numerical = 5,
    Sampling = 6,
    Io = 7,
    Panic = 8,
}

/// Forward and adjoint application counts.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UcosCallCounts {
    pub forward: u64,
    pub adjoint: u64,
}

/// A configured problem: forward map, prior, noise and schedule.
pub struct UcosProblem {
    inner: Arc<Problem>,
}

/// A problem with a registered measurement and its score models.
pub struct UcosSampler {
    problem: Arc<Problem>,
    sp: SamplingProblem,
    models: ScoreModels,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UcosStatus {
    match e {
        Error::Dimension(_) => UcosStatus::Dimension,
        Error::InvalidParameter(_) => UcosStatus::InvalidArgument,
        Error::Config(_) => UcosStatus::Config,
        Error::NotConverged { .. } | Error::Breakdown(_) | Error::DenseGuard(_) => UcosStatus::Numerical,
        Error::Sampling(_) => UcosStatus::Sampling,
        Error::Io(_) | Error::Format(_) => UcosStatus::Io,
        _ => UcosStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for `ucos_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (UcosStatus, String)>) -> UcosStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UcosStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            UcosStatus::Panic
        }
    }
}

fn core(e: Error) -> (UcosStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (UcosStatus, String) {
    (UcosStatus::NullPointer, format!("{what} is NULL"))
}

fn arg(msg: impl Into<String>) -> (UcosStatus, String) {
    (UcosStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (UcosStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(format!("{what} is not UTF-8")))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], (UcosStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != need {
        return Err((UcosStatus::Dimension, format!("{what} has length {len}, expected {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ucos_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ucos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

fn box_problem(cfg: &ProblemConfig, out: *mut *mut UcosProblem) -> Result<(), (UcosStatus, String)> {
    let p = Problem::build(cfg).map_err(core)?;
    unsafe { *out = Box::into_raw(Box::new(UcosProblem { inner: Arc::new(p) })) };
    Ok(())
}

/// Loads a problem from a TOML config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ucos_problem_load(path: *const c_char, out: *mut *mut UcosProblem) -> UcosStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let cfg = ProblemConfig::load(Path::new(path)).map_err(core)?;
        box_problem(&cfg, out)
    })
}

/// Built-in defaults for `kind` ("inpainting", "ct" or "deblur"); `rows`
/// of 0 keeps the default grid size.
///
/// # Safety
/// `kind` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ucos_problem_new(kind: *const c_char, rows: usize, out: *mut *mut UcosProblem) -> UcosStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind: ProblemKind = str_arg(kind, "kind")?.parse().map_err(core)?;
        let mut cfg = ProblemConfig::default();
        cfg.problem.kind = kind;
        cfg.problem.rows = (rows > 0).then_some(rows);
        cfg.resolve().map_err(core)?;
        box_problem(&cfg, out)
    })
}

/// # Safety
/// `p` must come from a `ucos_problem_*` constructor (or be NULL) and not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ucos_problem_free(p: *mut UcosProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Image length `n` and measurement length `m`.
///
/// # Safety
/// `p` must be a live problem handle; `n` and `m` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ucos_problem_dims(p: *const UcosProblem, n: *mut usize, m: *mut usize) -> UcosStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        if n.is_null() || m.is_null() {
            return Err(null("n or m"));
        }
        *n = p.inner.ops.n();
        *m = p.inner.ops.m();
        Ok(())
    })
}

/// Cumulative forward/adjoint applications on this problem.
///
/// # Safety
/// `p` must be a live problem handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ucos_problem_calls(p: *const UcosProblem, out: *mut UcosCallCounts) -> UcosStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = p.inner.calls();
        *out = UcosCallCounts { forward: c.forward, adjoint: c.adjoint };
        Ok(())
    })
}

/// Draws a ground truth from the prior and its noisy measurement, both
/// determined by the configured problem seed.
///
/// # Safety
/// `truth` must hold `n` doubles and `y` must hold `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn ucos_problem_synthesize(
    p: *const UcosProblem,
    truth: *mut f64,
    n: usize,
    y: *mut f64,
    m: usize,
) -> UcosStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        let t = slice_mut(truth, n, p.inner.ops.n(), "truth")?;
        let yy = slice_mut(y, m, p.inner.ops.m(), "y")?;
        let (tv, yv) = p.inner.synthesize().map_err(core)?;
        t.copy_from_slice(&tv);
        yy.copy_from_slice(&yv);
        Ok(())
    })
}

/// Registers the measurement `y` (one forward and one adjoint application)
/// and builds the score models.
///
/// # Safety
/// `p` must be a live problem handle, `y` must hold `m` doubles and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ucos_sampler_new(p: *const UcosProblem, y: *const f64, m: usize, out: *mut *mut UcosSampler) -> UcosStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        if y.is_null() {
            return Err(null("y"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let y = std::slice::from_raw_parts(y, m);
        let problem = p.inner.clone();
        let sp = problem.register(y).map_err(core)?;
        let models = problem.score_models(&sp).map_err(core)?;
        *out = Box::into_raw(Box::new(UcosSampler { problem, sp, models }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from `ucos_sampler_new` (or be NULL) and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ucos_sampler_free(s: *mut UcosSampler) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Draws `count` posterior samples into `out` (`count * n` doubles, one
/// sample after another). `method` is "ucos", "conditional", "sde_ald",
/// "dps" or "proj"; NULL uses the configured method. `calls`, if not NULL,
/// receives the operator applications made while sampling.
///
/// # Safety
/// `s` must be a live sampler handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ucos_sampler_run(
    s: *const UcosSampler,
    method: *const c_char,
    count: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
    calls: *mut UcosCallCounts,
) -> UcosStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("sampler"))?;
        let cfg = &s.problem.config;
        let method: Method = if method.is_null() { cfg.sampler.method } else { str_arg(method, "method")?.parse().map_err(core)? };
        if count == 0 {
            return Err(arg("count must be positive"));
        }
        let n = s.sp.ops.n();
        let dst = slice_mut(out, out_len, count.checked_mul(n).ok_or_else(|| arg("count * n overflows"))?, "out")?;
        let mut sc = cfg.sampler_config();
        sc.params = cfg.method_params(method);
        sc.ensemble_size = count;
        sc.seed = seed;
        let before = s.problem.calls();
        let ens = run_ensemble(&sc, &s.sp, &s.models).map_err(core)?;
        let used = s.problem.calls().since(before);
        for (chunk, x) in dst.chunks_exact_mut(n).zip(&ens.samples) {
            chunk.copy_from_slice(x);
        }
        if let Some(c) = calls.as_mut() {
            *c = UcosCallCounts { forward: used.forward, adjoint: used.adjoint };
        }
        Ok(())
    })
}
