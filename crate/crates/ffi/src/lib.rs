//! C ABI for guidelab.
//!
//! Objects are opaque handles created by constructors such as
//! [`gl_schedule_linear`] and released with the matching `gl_*_free`. Every fallible call
//! returns a [`GlStatus`]; on failure the message is available from
//! [`gl_last_error`] on the same thread until the next failing call.
//!
//! Conditions are passed as arrays of token ids, with a negative id meaning an
//! empty token. Vectors are caller-owned `double` buffers of length `dim`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use guidelab::{
    calibrate, decompose_step, recover_noise, sample, AnalyticPredictor, CalibrationResult, Condition, Error,
    GaussianMixtureModel, GuidanceSpec, NoisePredictor, NoiseSchedule, SeededRng, Trajectory,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    InconsistentTrajectory = 5,
    Io = 6,
    Panic = 7,
}

pub struct GlSchedule {
    inner: NoiseSchedule,
}

pub struct GlMixture {
    predictor: AnalyticPredictor,
}

pub struct GlTrajectory {
    inner: Trajectory,
}

pub struct GlCalibration {
    inner: CalibrationResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> GlStatus {
    match err {
        Error::DimensionMismatch { .. } => GlStatus::DimensionMismatch,
        Error::ZeroDirection { .. }
        | Error::ZeroGuidanceDirection { .. }
        | Error::NonFinite(_)
        | Error::DegenerateTransition { .. }
        | Error::NoCalibratableSteps { .. } => GlStatus::Numerical,
        Error::InconsistentTrajectory { .. } => GlStatus::InconsistentTrajectory,
        Error::Io(_) | Error::MissingFile(_) => GlStatus::Io,
        _ => GlStatus::InvalidArgument,
    }
}

struct Fail(GlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GlStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn condition(tokens: *const i64, n: usize) -> Result<Condition, Fail> {
    if n == 0 {
        return Err(Fail(
            GlStatus::InvalidArgument,
            "condition needs at least one token".into(),
        ));
    }
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    let ids = std::slice::from_raw_parts(tokens, n)
        .iter()
        .map(|&t| if t < 0 { None } else { u32::try_from(t).ok() })
        .collect();
    Ok(Condition::new(ids)?)
}

fn check_len(got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Error::DimensionMismatch { left: got, right: want }.into());
    }
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread; empty when none. Valid until the next failure.
#[no_mangle]
pub extern "C" fn gl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Linear beta schedule with `steps` steps from `beta_min` to `beta_max`.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn gl_schedule_linear(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    out: *mut *mut GlSchedule,
) -> GlStatus {
    guard(|| {
        let inner = NoiseSchedule::linear(steps, beta_min, beta_max)?;
        put(out, GlSchedule { inner })
    })
}

/// # Safety
/// `schedule` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gl_schedule_steps(schedule: *const GlSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.inner.steps())
}

/// `alpha_bar(t)` for `t` in `0..=steps`.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_schedule_alpha_bar(schedule: *const GlSchedule, t: usize, out: *mut f64) -> GlStatus {
    guard(|| {
        let s = &reference(schedule, "schedule")?.inner;
        if t > s.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: s.steps(),
            }
            .into());
        }
        *out.as_mut().ok_or_else(|| null("out"))? = s.alpha_bar(t);
        Ok(())
    })
}

/// # Safety
/// `schedule` must be a handle from this library or null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_schedule_free(schedule: *mut GlSchedule) {
    free(schedule)
}

/// Mixture from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_from_json(json: *const c_char, out: *mut *mut GlMixture) -> GlStatus {
    guard(|| {
        let gmm = GaussianMixtureModel::from_json_str(text(json, "json")?)?;
        put(
            out,
            GlMixture {
                predictor: AnalyticPredictor::new(gmm),
            },
        )
    })
}

/// The built-in toy mixture in `dim` dimensions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_toy(dim: usize, out: *mut *mut GlMixture) -> GlStatus {
    guard(|| {
        let gmm = GaussianMixtureModel::default_toy(dim)?;
        put(
            out,
            GlMixture {
                predictor: AnalyticPredictor::new(gmm),
            },
        )
    })
}

/// # Safety
/// `mixture` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_dim(mixture: *const GlMixture) -> usize {
    mixture.as_ref().map_or(0, |m| m.predictor.dim())
}

/// # Safety
/// `mixture` must be a handle from this library or null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_free(mixture: *mut GlMixture) {
    free(mixture)
}

/// Runs one guided sampler.
///
/// `spec_json` is a guidance spec such as `{"omega": 5.5, "method": "zigzag"}`.
/// The final sample is written to `out_x` (length `dim`); the trajectory
/// handle is written to `out_trajectory` unless it is null.
///
/// # Safety
/// Handles must be live, `tokens` must hold `n_tokens` ids, `out_x` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn gl_sample(
    mixture: *const GlMixture,
    schedule: *const GlSchedule,
    spec_json: *const c_char,
    tokens: *const i64,
    n_tokens: usize,
    seed: u64,
    out_x: *mut f64,
    dim: usize,
    out_trajectory: *mut *mut GlTrajectory,
) -> GlStatus {
    guard(|| {
        let pred = &reference(mixture, "mixture")?.predictor;
        let sched = &reference(schedule, "schedule")?.inner;
        let spec: GuidanceSpec = serde_json::from_str(text(spec_json, "spec_json")?)
            .map_err(|e| Fail(GlStatus::InvalidArgument, format!("guidance spec: {e}")))?;
        let c = condition(tokens, n_tokens)?;
        check_len(dim, pred.dim())?;
        let out = slice_mut(out_x, dim, "out_x")?;
        let (x, traj) = sample(&spec, pred, &c, sched, &mut SeededRng::new(seed))?;
        out.copy_from_slice(&x);
        if !out_trajectory.is_null() {
            put(out_trajectory, GlTrajectory { inner: traj })?;
        }
        Ok(())
    })
}

/// Number of committed steps.
///
/// # Safety
/// `trajectory` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gl_trajectory_len(trajectory: *const GlTrajectory) -> usize {
    trajectory.as_ref().map_or(0, |t| t.inner.steps.len())
}

/// Step `index` (0 is `t = T`): its timestep and both latents.
///
/// # Safety
/// `trajectory` must be live; `x_t` and `x_prev` must hold `dim` doubles (either may be null).
#[no_mangle]
pub unsafe extern "C" fn gl_trajectory_step(
    trajectory: *const GlTrajectory,
    index: usize,
    out_t: *mut usize,
    x_t: *mut f64,
    x_prev: *mut f64,
    dim: usize,
) -> GlStatus {
    guard(|| {
        let traj = &reference(trajectory, "trajectory")?.inner;
        let step = traj.steps.get(index).ok_or_else(|| {
            Fail(
                GlStatus::InvalidArgument,
                format!("step {index} out of range (len {})", traj.steps.len()),
            )
        })?;
        check_len(dim, step.x_t.dim())?;
        if let Some(t) = out_t.as_mut() {
            *t = step.t;
        }
        if !x_t.is_null() {
            slice_mut(x_t, dim, "x_t")?.copy_from_slice(&step.x_t);
        }
        if !x_prev.is_null() {
            slice_mut(x_prev, dim, "x_prev")?.copy_from_slice(&step.x_prev);
        }
        Ok(())
    })
}

/// # Safety
/// `trajectory` must be a handle from this library or null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_trajectory_free(trajectory: *mut GlTrajectory) {
    free(trajectory)
}

/// Calibrates a trajectory against the mixture's predictor under the given condition.
///
/// # Safety
/// Handles must be live, `tokens` must hold `n_tokens` ids, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_calibrate(
    trajectory: *const GlTrajectory,
    mixture: *const GlMixture,
    schedule: *const GlSchedule,
    tokens: *const i64,
    n_tokens: usize,
    out: *mut *mut GlCalibration,
) -> GlStatus {
    guard(|| {
        let traj = &reference(trajectory, "trajectory")?.inner;
        let pred = &reference(mixture, "mixture")?.predictor;
        let sched = &reference(schedule, "schedule")?.inner;
        let c = condition(tokens, n_tokens)?;
        let inner = calibrate(traj, pred, &c, sched)?;
        put(out, GlCalibration { inner })
    })
}

/// Mean effective guidance scale over the calibrated steps.
///
/// # Safety
/// `calibration` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_calibration_omega_e_mean(calibration: *const GlCalibration, out: *mut f64) -> GlStatus {
    guard(|| {
        let cal = &reference(calibration, "calibration")?.inner;
        *out.as_mut().ok_or_else(|| null("out"))? = cal.omega_e_mean;
        Ok(())
    })
}

/// Number of calibrated (not skipped) steps.
///
/// # Safety
/// `calibration` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gl_calibration_len(calibration: *const GlCalibration) -> usize {
    calibration.as_ref().map_or(0, |c| c.inner.per_step.len())
}

/// Per-step scale: timestep and `omega_e_t` of calibrated step `index`.
///
/// # Safety
/// `calibration` must be live; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn gl_calibration_step(
    calibration: *const GlCalibration,
    index: usize,
    out_t: *mut usize,
    out_omega_e: *mut f64,
) -> GlStatus {
    guard(|| {
        let cal = &reference(calibration, "calibration")?.inner;
        let s = cal
            .per_step
            .get(index)
            .ok_or_else(|| Fail(GlStatus::InvalidArgument, format!("step {index} out of range")))?;
        if let Some(t) = out_t.as_mut() {
            *t = s.t;
        }
        if let Some(w) = out_omega_e.as_mut() {
            *w = s.omega_e_t;
        }
        Ok(())
    })
}

/// # Safety
/// `calibration` must be a handle from this library or null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_calibration_free(calibration: *mut GlCalibration) {
    free(calibration)
}

/// Scale of one step: `|proj(eps_star - eps_u)| / |eps_c - eps_u|` and the signed coefficient.
///
/// # Safety
/// Input buffers must hold `dim` doubles; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn gl_decompose_step(
    eps_star: *const f64,
    eps_u: *const f64,
    eps_c: *const f64,
    dim: usize,
    out_omega_e: *mut f64,
    out_coefficient: *mut f64,
) -> GlStatus {
    guard(|| {
        let d = decompose_step(
            0,
            slice(eps_star, dim, "eps_star")?,
            slice(eps_u, dim, "eps_u")?,
            slice(eps_c, dim, "eps_c")?,
        )?;
        if let Some(w) = out_omega_e.as_mut() {
            *w = d.omega_e_t;
        }
        if let Some(k) = out_coefficient.as_mut() {
            *k = d.coefficient;
        }
        Ok(())
    })
}

/// The noise a DDIM step from `t` would need to move `x_t` onto `x_prev`.
///
/// # Safety
/// `schedule` must be live; all buffers must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn gl_recover_noise(
    schedule: *const GlSchedule,
    t: usize,
    x_t: *const f64,
    x_prev: *const f64,
    dim: usize,
    out_eps: *mut f64,
) -> GlStatus {
    guard(|| {
        let sched = &reference(schedule, "schedule")?.inner;
        let eps = recover_noise(slice(x_t, dim, "x_t")?, slice(x_prev, dim, "x_prev")?, t, sched)?;
        slice_mut(out_eps, dim, "out_eps")?.copy_from_slice(&eps);
        Ok(())
    })
}
