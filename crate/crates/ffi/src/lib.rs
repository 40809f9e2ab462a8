//! C ABI for the `lozo` crate.
//!
//! Objects are opaque handles created by `lozo_*_new`/`lozo_*_from_json` and
//! released with the matching `lozo_*_free`. Every fallible call returns a
//! [`LozoStatus`]; on failure the message is available from
//! [`lozo_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lozo::optimizers::{Algorithm, Optimizer, OptimizerConfig};
use lozo::problems::{BoxedOracle, LossOracle, ProblemSpec};
use lozo::{Error, ParamSet, SamplerKind, Seed};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LozoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFiniteLoss = 4,
    StepAborted = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LozoAlgorithm {
    ZoSgd = 0,
    Lozo = 1,
    LozoM = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LozoSampler {
    Normal = 0,
    Haar = 1,
    Coordinate = 2,
}

/// Optimizer settings. `rank` applies to every layer.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LozoOptimizerConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub nu: u64,
    pub rank: usize,
    pub beta: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub sampler: LozoSampler,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LozoStepReport {
    pub step: u64,
    pub fd_scalar: f64,
    pub est_norm: f64,
}

pub struct LozoProblem {
    oracle: BoxedOracle,
}

pub struct LozoParams {
    inner: ParamSet,
}

pub struct LozoOptimizer {
    inner: Optimizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LozoStatus {
    match e {
        Error::DimensionMismatch { .. } => LozoStatus::DimensionMismatch,
        Error::InvalidArgument(_) => LozoStatus::InvalidArgument,
        Error::NonFiniteLoss { .. } => LozoStatus::NonFiniteLoss,
        Error::StepAborted { .. } => LozoStatus::StepAborted,
        Error::Config(_) => LozoStatus::Config,
        Error::Io(_) => LozoStatus::Io,
    }
}

fn fail(status: LozoStatus, msg: impl Into<String>) -> LozoStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics onto status codes.
fn guard(f: impl FnOnce() -> Result<(), LozoStatus>) -> LozoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LozoStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(LozoStatus::Panic, msg)
        }
    }
}

fn lift<T>(r: lozo::Result<T>) -> Result<T, LozoStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, LozoStatus> {
    // SAFETY: the caller passes either NULL or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| fail(LozoStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, LozoStatus> {
    // SAFETY: as for `deref`, and the handle is not aliased during the call.
    unsafe { p.as_mut() }.ok_or_else(|| fail(LozoStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), LozoStatus> {
    if out.is_null() {
        return Err(fail(LozoStatus::NullPointer, "output pointer is NULL"));
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lozo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn lozo_optimizer_config_default() -> LozoOptimizerConfig {
    let d = OptimizerConfig::default();
    LozoOptimizerConfig {
        alpha: d.alpha,
        epsilon: d.epsilon,
        nu: d.nu,
        rank: d.ranks.first().copied().unwrap_or(2),
        beta: d.beta,
        total_steps: d.total_steps,
        seed: d.base_seed.0,
        sampler: LozoSampler::Normal,
    }
}

/// Builds a problem from a JSON problem spec, e.g.
/// `{"kind": "quadratic", "shapes": [[8, 6]]}`.
///
/// # Safety
/// `json` must be NULL or a NUL-terminated string; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_problem_from_json(json: *const c_char, out: *mut *mut LozoProblem) -> LozoStatus {
    guard(|| {
        if json.is_null() {
            return Err(fail(LozoStatus::NullPointer, "json is NULL"));
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let text = unsafe { CStr::from_ptr(json) }
            .to_str()
            .map_err(|e| fail(LozoStatus::Config, format!("json is not UTF-8: {e}")))?;
        let spec: ProblemSpec =
            serde_json::from_str(text).map_err(|e| fail(LozoStatus::Config, format!("problem spec: {e}")))?;
        let oracle = lift(spec.build())?;
        // SAFETY: forwarded from the caller's contract on `out`.
        unsafe { write_out(out, LozoProblem { oracle }) }
    })
}

/// # Safety
/// `problem` must be NULL or a handle from [`lozo_problem_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lozo_problem_free(problem: *mut LozoProblem) {
    if !problem.is_null() {
        // SAFETY: the handle came from `Box::into_raw` and is freed once.
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_problem_num_layers(problem: *const LozoProblem, out: *mut usize) -> LozoStatus {
    guard(|| {
        let p = unsafe { deref(problem, "problem") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = p.oracle.dims().len();
        Ok(())
    })
}

/// # Safety
/// `problem` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_problem_layer_dims(
    problem: *const LozoProblem,
    layer: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> LozoStatus {
    guard(|| {
        let p = unsafe { deref(problem, "problem") }?;
        let rows = unsafe { deref_mut(rows, "rows") }?;
        let cols = unsafe { deref_mut(cols, "cols") }?;
        let dims = p.oracle.dims();
        let &(m, n) = dims.get(layer).ok_or_else(|| {
            fail(LozoStatus::InvalidArgument, format!("layer {layer} out of range ({} layers)", dims.len()))
        })?;
        *rows = m;
        *cols = n;
        Ok(())
    })
}

/// Expected loss `f(X)` averaged over all samples.
///
/// # Safety
/// `problem` and `params` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_problem_loss(
    problem: *const LozoProblem,
    params: *const LozoParams,
    out: *mut f64,
) -> LozoStatus {
    guard(|| {
        let p = unsafe { deref(problem, "problem") }?;
        let x = unsafe { deref(params, "params") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        if x.inner.dims() != p.oracle.dims() {
            return Err(fail(LozoStatus::DimensionMismatch, "params do not match the problem's layers"));
        }
        *out = p.oracle.expected_loss(&x.inner);
        Ok(())
    })
}

/// Optimal expected loss when the problem knows it; `NaN` otherwise.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_problem_optimal_loss(problem: *const LozoProblem, out: *mut f64) -> LozoStatus {
    guard(|| {
        let p = unsafe { deref(problem, "problem") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = p.oracle.optimal_loss().unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Zero parameters shaped for `problem`.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_params_zeros(problem: *const LozoProblem, out: *mut *mut LozoParams) -> LozoStatus {
    guard(|| {
        let p = unsafe { deref(problem, "problem") }?;
        let inner = ParamSet::zeros(&p.oracle.dims());
        unsafe { write_out(out, LozoParams { inner }) }
    })
}

/// # Safety
/// `params` must be NULL or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lozo_params_free(params: *mut LozoParams) {
    if !params.is_null() {
        // SAFETY: the handle came from `Box::into_raw` and is freed once.
        drop(unsafe { Box::from_raw(params) });
    }
}

/// Total number of entries across all layers.
///
/// # Safety
/// `params` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_params_len(params: *const LozoParams, out: *mut usize) -> LozoStatus {
    guard(|| {
        let x = unsafe { deref(params, "params") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = x.inner.num_elements();
        Ok(())
    })
}

/// Copies all entries, layer by layer in row-major order, into `buf`.
///
/// # Safety
/// `params` must be a live handle; `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lozo_params_read(params: *const LozoParams, buf: *mut f64, len: usize) -> LozoStatus {
    guard(|| {
        let x = unsafe { deref(params, "params") }?;
        let total = x.inner.num_elements();
        if len != total {
            return Err(fail(LozoStatus::DimensionMismatch, format!("buffer holds {len}, params have {total}")));
        }
        if buf.is_null() {
            return Err(fail(LozoStatus::NullPointer, "buf is NULL"));
        }
        // SAFETY: non-null with room for `len` doubles per the contract.
        let dst = unsafe { std::slice::from_raw_parts_mut(buf, len) };
        let mut at = 0;
        for layer in x.inner.layers() {
            let src = layer.as_slice();
            dst[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
        Ok(())
    })
}

/// Overwrites all entries from `buf`, in the layout of [`lozo_params_read`].
///
/// # Safety
/// `params` must be a live handle; `buf` must hold `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn lozo_params_write(params: *mut LozoParams, buf: *const f64, len: usize) -> LozoStatus {
    guard(|| {
        let x = unsafe { deref_mut(params, "params") }?;
        let total = x.inner.num_elements();
        if len != total {
            return Err(fail(LozoStatus::DimensionMismatch, format!("buffer holds {len}, params have {total}")));
        }
        if buf.is_null() {
            return Err(fail(LozoStatus::NullPointer, "buf is NULL"));
        }
        // SAFETY: non-null with `len` readable doubles per the contract.
        let src = unsafe { std::slice::from_raw_parts(buf, len) };
        let mut at = 0;
        for layer in x.inner.layers_mut() {
            let dst = layer.as_mut_slice();
            let n = dst.len();
            dst.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        Ok(())
    })
}

/// Creates an optimizer for the layer shapes of `problem`.
///
/// # Safety
/// `problem` must be a live handle; `config` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_optimizer_new(
    algo: LozoAlgorithm,
    config: *const LozoOptimizerConfig,
    problem: *const LozoProblem,
    out: *mut *mut LozoOptimizer,
) -> LozoStatus {
    guard(|| {
        let c = unsafe { deref(config, "config") }?;
        let p = unsafe { deref(problem, "problem") }?;
        let algo = match algo {
            LozoAlgorithm::ZoSgd => Algorithm::ZoSgd,
            LozoAlgorithm::Lozo => Algorithm::Lozo,
            LozoAlgorithm::LozoM => Algorithm::LozoM,
        };
        let v_kind = match c.sampler {
            LozoSampler::Normal => SamplerKind::StandardNormal,
            LozoSampler::Haar => SamplerKind::HaarScaled,
            LozoSampler::Coordinate => SamplerKind::RandomCoordinate,
        };
        let cfg = OptimizerConfig {
            alpha: c.alpha,
            epsilon: c.epsilon,
            nu: c.nu,
            ranks: vec![c.rank],
            beta: c.beta,
            total_steps: c.total_steps,
            base_seed: Seed(c.seed),
            v_kind,
        };
        let inner = lift(Optimizer::new(algo, cfg, &p.oracle.dims()))?;
        unsafe { write_out(out, LozoOptimizer { inner }) }
    })
}

/// # Safety
/// `optimizer` must be NULL or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lozo_optimizer_free(optimizer: *mut LozoOptimizer) {
    if !optimizer.is_null() {
        // SAFETY: the handle came from `Box::into_raw` and is freed once.
        drop(unsafe { Box::from_raw(optimizer) });
    }
}

/// Takes one step in place. On failure `params` and the optimizer are unchanged.
/// `report` may be NULL.
///
/// # Safety
/// All handles must be live and `params` must not be aliased during the call.
#[no_mangle]
pub unsafe extern "C" fn lozo_optimizer_step(
    optimizer: *mut LozoOptimizer,
    problem: *const LozoProblem,
    params: *mut LozoParams,
    report: *mut LozoStepReport,
) -> LozoStatus {
    guard(|| {
        let opt = unsafe { deref_mut(optimizer, "optimizer") }?;
        let p = unsafe { deref(problem, "problem") }?;
        let x = unsafe { deref_mut(params, "params") }?;
        let r = lift(opt.inner.step(&p.oracle, &mut x.inner))?;
        // SAFETY: NULL is allowed; otherwise the caller provides writable storage.
        if let Some(out) = unsafe { report.as_mut() } {
            *out = LozoStepReport {
                step: r.t,
                fd_scalar: r.c,
                est_norm: r.est_norm,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `optimizer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lozo_optimizer_steps_taken(optimizer: *const LozoOptimizer, out: *mut u64) -> LozoStatus {
    guard(|| {
        let opt = unsafe { deref(optimizer, "optimizer") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = opt.inner.steps_taken();
        Ok(())
    })
}
