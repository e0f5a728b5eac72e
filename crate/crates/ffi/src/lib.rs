//! C interface to `dbu-core`.
//!
//! Models are opaque handles from [`dbu_model_load`], released with
//! [`dbu_model_free`]. Every fallible call returns a [`DbuStatus`]; the
//! message of the most recent failure on the calling thread is available
//! from [`dbu_last_error`]. Matrices are dense, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dbu_core::attacks::{attack_batch, AttackMethod, AttackSpec, LossTarget, Norm};
use dbu_core::autodiff::Tensor;
use dbu_core::eval::Measure;
use dbu_core::models::Model;
use dbu_core::numerics::RngStream;
use dbu_core::smoothing::{certify_batch, SmoothingConfig};
use dbu_core::Error;

/// Result of a call. `DBU_OK` is zero; the rest mirror the core error kinds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbuStatus {
    DbuOk = 0,
    DbuDomain = 1,
    DbuShape = 2,
    DbuNumeric = 3,
    DbuIndex = 4,
    DbuContract = 5,
    DbuTraining = 6,
    DbuMetric = 7,
    DbuParse = 8,
    DbuConfig = 9,
    DbuFormat = 10,
    DbuMissingArtifacts = 11,
    DbuIo = 12,
    /// A required pointer was null or a string was not UTF-8.
    DbuInvalidArgument = 13,
    /// The library panicked; the handle involved should not be reused.
    DbuPanic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbuMeasure {
    DbuDiffEntropy = 0,
    DbuMutualInfo = 1,
    /// Scored as `-alpha0`.
    DbuPrecision = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbuAttackMethod {
    DbuFgsm = 0,
    DbuPgd = 1,
    DbuNoise = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbuLossTarget {
    DbuCrossEntropy = 0,
    DbuDiffEntropyTarget = 1,
    DbuMutualInfoTarget = 2,
    DbuPrecisionTarget = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbuNorm {
    DbuL2 = 0,
    DbuLinf = 1,
}

/// Opaque model handle.
pub struct DbuModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn status_of(e: &Error) -> DbuStatus {
    match e.kind() {
        "domain" => DbuStatus::DbuDomain,
        "shape" => DbuStatus::DbuShape,
        "numeric" => DbuStatus::DbuNumeric,
        "index" => DbuStatus::DbuIndex,
        "contract" => DbuStatus::DbuContract,
        "training" => DbuStatus::DbuTraining,
        "metric" => DbuStatus::DbuMetric,
        "parse" => DbuStatus::DbuParse,
        "config" => DbuStatus::DbuConfig,
        "format" => DbuStatus::DbuFormat,
        "missing_artifacts" => DbuStatus::DbuMissingArtifacts,
        _ => DbuStatus::DbuIo,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Core(Error),
    Arg(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, recording any failure for [`dbu_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DbuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DbuStatus::DbuOk,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg.to_string());
            DbuStatus::DbuInvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DbuStatus::DbuPanic
        }
    }
}

unsafe fn model_ref<'a>(m: *const DbuModel) -> Result<&'a Model, Fail> {
    unsafe { m.as_ref() }.map(|m| &m.inner).ok_or(Fail::Arg("null model handle"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Arg(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Arg(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn inputs(model: &Model, x: *const f64, rows: usize) -> Result<Tensor, Fail> {
    let d = model.input_dim();
    let data = unsafe { slice(x, rows * d, "null input matrix") }?;
    Ok(Tensor::new(rows, d, data.to_vec())?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dbu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dbu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model container written by `dbu train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_load(path: *const c_char, out: *mut *mut DbuModel) -> DbuStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(Fail::Arg("null argument"));
        }
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| Fail::Arg("path is not UTF-8"))?;
        let m = Model::load(Path::new(path))?;
        unsafe { *out = Box::into_raw(Box::new(DbuModel { inner: m })) };
        Ok(())
    })
}

/// Releases a handle from [`dbu_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`dbu_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_free(model: *mut DbuModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of input features, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_input_dim(model: *const DbuModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.input_dim())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_num_classes(model: *const DbuModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.num_classes)
}

/// Concentrations for `rows` inputs of `input_dim` features each, written
/// to `out` (`rows x num_classes`).
///
/// # Safety
/// `x` must hold `rows * input_dim` values and `out` room for
/// `rows * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_alphas(
    model: *const DbuModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> DbuStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let a = m.alphas(&unsafe { inputs(m, x, rows) }?)?;
        unsafe { slice_mut(out, rows * m.num_classes, "null output") }?.copy_from_slice(a.data());
        Ok(())
    })
}

/// Predicted class per input.
///
/// # Safety
/// `x` must hold `rows * input_dim` values and `out` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_predict(
    model: *const DbuModel,
    x: *const f64,
    rows: usize,
    out: *mut usize,
) -> DbuStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let p = m.predict(&unsafe { inputs(m, x, rows) }?)?;
        unsafe { slice_mut(out, rows, "null output") }?.copy_from_slice(&p);
        Ok(())
    })
}

fn measure_of(m: DbuMeasure) -> Measure {
    match m {
        DbuMeasure::DbuDiffEntropy => Measure::DiffEntropy,
        DbuMeasure::DbuMutualInfo => Measure::MutualInfo,
        DbuMeasure::DbuPrecision => Measure::Precision,
    }
}

/// Uncertainty score per input; higher means more uncertain.
///
/// # Safety
/// `x` must hold `rows * input_dim` values and `out` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn dbu_model_scores(
    model: *const DbuModel,
    measure: DbuMeasure,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> DbuStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let s = measure_of(measure).scores(&m.alphas(&unsafe { inputs(m, x, rows) }?)?)?;
        unsafe { slice_mut(out, rows, "null output") }?.copy_from_slice(&s);
        Ok(())
    })
}

/// Attack settings. Zero `pgd_steps` or `noise_samples` take the defaults;
/// a non-positive `pgd_step_size` uses `2.5 * radius / pgd_steps`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DbuAttack {
    pub method: DbuAttackMethod,
    pub loss_target: DbuLossTarget,
    /// Nonzero to minimize the target instead of maximizing it.
    pub minimize: i32,
    pub norm: DbuNorm,
    pub radius: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub noise_samples: usize,
}

fn spec_of(a: &DbuAttack) -> AttackSpec {
    use dbu_core::attacks::Direction;
    let method = match a.method {
        DbuAttackMethod::DbuFgsm => AttackMethod::Fgsm,
        DbuAttackMethod::DbuPgd => AttackMethod::Pgd,
        DbuAttackMethod::DbuNoise => AttackMethod::Noise,
    };
    let target = match a.loss_target {
        DbuLossTarget::DbuCrossEntropy => LossTarget::CrossEntropy,
        DbuLossTarget::DbuDiffEntropyTarget => LossTarget::DiffEntropy,
        DbuLossTarget::DbuMutualInfoTarget => LossTarget::MutualInfo,
        DbuLossTarget::DbuPrecisionTarget => LossTarget::Precision,
    };
    let mut s = AttackSpec::new(method, target)
        .with_radius(a.radius)
        .with_norm(match a.norm {
            DbuNorm::DbuL2 => Norm::L2,
            DbuNorm::DbuLinf => Norm::Linf,
        })
        .with_direction(if a.minimize != 0 { Direction::Minimize } else { Direction::Maximize });
    if a.pgd_steps > 0 {
        s.pgd_steps = a.pgd_steps;
    }
    if a.pgd_step_size > 0.0 {
        s.pgd_step_size = Some(a.pgd_step_size);
    }
    if a.noise_samples > 0 {
        s.noise_samples = a.noise_samples;
    }
    s
}

/// Attacks every input. `labels` may be null unless the target is
/// cross-entropy. Writes the perturbed inputs to `out_x` and, if not null,
/// the achieved objective per row to `out_achieved`. `seed` drives the
/// noise attack only.
///
/// # Safety
/// `x` and `out_x` must hold `rows * input_dim` values; `labels` and
/// `out_achieved`, when not null, `rows` values.
#[no_mangle]
pub unsafe extern "C" fn dbu_attack(
    model: *const DbuModel,
    attack: *const DbuAttack,
    x: *const f64,
    labels: *const usize,
    rows: usize,
    seed: u64,
    out_x: *mut f64,
    out_achieved: *mut f64,
) -> DbuStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let spec = spec_of(unsafe { attack.as_ref() }.ok_or(Fail::Arg("null attack"))?);
        let xs = unsafe { inputs(m, x, rows) }?;
        let labels = if labels.is_null() { None } else { Some(unsafe { slice(labels, rows, "labels") }?) };
        let res = attack_batch(m, &xs, &spec, labels, &mut RngStream::new(seed, 3))?;
        let d = m.input_dim();
        let out = unsafe { slice_mut(out_x, rows * d, "null output") }?;
        for (i, r) in res.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&r.x_adv);
        }
        if !out_achieved.is_null() {
            let a = unsafe { slice_mut(out_achieved, rows, "achieved") }?;
            for (v, r) in a.iter_mut().zip(&res) {
                *v = r.achieved_loss;
            }
        }
        Ok(())
    })
}

/// Median-smoothing certificates. For input `i` and radius `j` the bounds
/// land at index `i * n_radii + j` of the three outputs; unattainable
/// bounds are infinite.
///
/// # Safety
/// `x` must hold `rows * input_dim` values, `radii` `n_radii` values, and
/// each output `rows * n_radii` values.
#[no_mangle]
pub unsafe extern "C" fn dbu_certify(
    model: *const DbuModel,
    measure: DbuMeasure,
    sigma: f64,
    n_samples: usize,
    conf_alpha: f64,
    x: *const f64,
    rows: usize,
    radii: *const f64,
    n_radii: usize,
    seed: u64,
    out_lower: *mut f64,
    out_median: *mut f64,
    out_upper: *mut f64,
) -> DbuStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let cfg = SmoothingConfig {
            sigma,
            n_samples,
            conf_alpha,
            measure: measure_of(measure),
        };
        let xs = unsafe { inputs(m, x, rows) }?;
        let radii = unsafe { slice(radii, n_radii, "null radii") }?;
        let res = certify_batch(m, &xs, &cfg, radii, &mut RngStream::new(seed, 6))?;
        let n = rows * n_radii;
        let lo = unsafe { slice_mut(out_lower, n, "null output") }?;
        let med = unsafe { slice_mut(out_median, n, "null output") }?;
        let hi = unsafe { slice_mut(out_upper, n, "null output") }?;
        for (k, c) in res.iter().flatten().enumerate() {
            lo[k] = c.m_lower;
            med[k] = c.m_median;
            hi[k] = c.m_upper;
        }
        Ok(())
    })
}
