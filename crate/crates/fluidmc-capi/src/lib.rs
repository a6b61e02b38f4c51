//! C ABI for the fluid model checker.
//!
//! Conventions shared by every function here:
//! - Fallible calls return a [`FluidmcStatus`] and deliver results through
//!   out-pointers, which are written only on `FLUIDMC_STATUS_OK`.
//! - Handles are opaque. Free each one exactly once with its matching `_free`
//!   function; `_free` accepts null and does nothing.
//! - After any non-OK status, [`fluidmc_last_error_message`] returns a
//!   description of the failure. The message is thread-local and stays valid
//!   until the next failing call on the same thread.
//! - Strings returned as `char*` are NUL-terminated, allocated by this
//!   library, and must be released with [`fluidmc_string_free`].
//! - Panics never unwind across the boundary; they surface as
//!   `FLUIDMC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fluidmc::csl::{self, CheckError, CheckOutcome, Formula};
use fluidmc::fluid;
use fluidmc::model::PopulationModel;
use fluidmc::reward;

/// Status code of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluidmcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The model or formula failed to parse or resolve.
    ParseError = 3,
    /// Integration, equilibrium search, or linear algebra failed.
    NumericError = 4,
    /// The formula is well-formed but cannot be checked as requested.
    CheckError = 5,
    /// An index or buffer length did not match the model.
    OutOfRange = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// Truth component of a check result.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluidmcTruth {
    False = 0,
    True = 1,
    /// `=?` query: `value` carries the computed quantity, no truth claimed.
    Value = 2,
    /// Threshold query too close to the threshold to resolve reliably.
    Indeterminate = 3,
}

/// Result of checking one formula from one initial state at time zero.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FluidmcCheckResult {
    /// The computed probability or reward.
    pub value: f64,
    pub truth: FluidmcTruth,
}

/// Opaque parsed population model.
pub struct FluidmcModel(PopulationModel);

/// Opaque dense-output fluid trajectory.
pub struct FluidmcTrajectory(fluid::FluidTrajectory);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn fail(status: FluidmcStatus, msg: impl std::fmt::Display) -> FluidmcStatus {
    set_error(msg);
    status
}

fn check_error_status(e: &CheckError) -> FluidmcStatus {
    match e {
        CheckError::Numeric(_) => FluidmcStatus::NumericError,
        CheckError::Syntax(_)
        | CheckError::UnknownAtom(_)
        | CheckError::UnknownReward(_)
        | CheckError::Model(_) => FluidmcStatus::ParseError,
        CheckError::NestedFormulaUnsupported => FluidmcStatus::CheckError,
    }
}

/// Runs `body` with panics converted to `FLUIDMC_STATUS_PANIC`.
fn guarded(body: impl FnOnce() -> FluidmcStatus) -> FluidmcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(FluidmcStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string valid for reads.
unsafe fn utf8_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, FluidmcStatus> {
    if s.is_null() {
        return Err(fail(FluidmcStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(FluidmcStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string. Never freed.
#[no_mangle]
pub extern "C" fn fluidmc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread, or an empty string
/// if nothing failed yet. Do not free; the pointer is invalidated by the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn fluidmc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string allocated by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by a `char*`-returning
/// function of this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses model source text into a new model handle.
///
/// # Safety
/// `src` must be a NUL-terminated string valid for reads; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_model_parse(
    src: *const c_char,
    out: *mut *mut FluidmcModel,
) -> FluidmcStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FluidmcStatus::NullArgument, "out is null");
        }
        let text = match utf8_arg(src, "src") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match PopulationModel::parse(text) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(FluidmcModel(m)));
                FluidmcStatus::Ok
            }
            Err(e) => fail(FluidmcStatus::ParseError, e),
        }
    })
}

/// Releases a model handle.
///
/// # Safety
/// `m` must be null or a handle from [`fluidmc_model_parse`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_model_free(m: *mut FluidmcModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of agent states, or 0 if `m` is null.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_model_n_states(m: *const FluidmcModel) -> usize {
    if m.is_null() {
        return 0;
    }
    (*m).0.n_states()
}

/// Name of state `index` as a newly allocated string, or null (with the error
/// message set) when `m` is null or the index is out of range. Free the
/// result with [`fluidmc_string_free`].
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_model_state_name(
    m: *const FluidmcModel,
    index: usize,
) -> *mut c_char {
    if m.is_null() {
        fail(FluidmcStatus::NullArgument, "model is null");
        return ptr::null_mut();
    }
    let model = &(*m).0;
    match model.agent.names().get(index) {
        Some(name) => CString::new(name.as_str())
            .map(CString::into_raw)
            .unwrap_or(ptr::null_mut()),
        None => {
            fail(
                FluidmcStatus::OutOfRange,
                format!("state index {index} out of range ({} states)", model.n_states()),
            );
            ptr::null_mut()
        }
    }
}

/// Resolves a state name to its index.
///
/// # Safety
/// `m` must be a live model handle; `name` a readable NUL-terminated string;
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_model_state_index(
    m: *const FluidmcModel,
    name: *const c_char,
    out: *mut usize,
) -> FluidmcStatus {
    guarded(|| {
        if m.is_null() || out.is_null() {
            return fail(FluidmcStatus::NullArgument, "model or out is null");
        }
        let name = match utf8_arg(name, "name") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match (*m).0.agent.index_of(name) {
            Some(i) => {
                *out = i;
                FluidmcStatus::Ok
            }
            None => fail(FluidmcStatus::OutOfRange, format!("unknown state `{name}`")),
        }
    })
}

/// Integrates the fluid ODE over `[0, t_max]` into a trajectory handle.
///
/// # Safety
/// `m` must be a live model handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_fluid_solve(
    m: *const FluidmcModel,
    t_max: f64,
    out: *mut *mut FluidmcTrajectory,
) -> FluidmcStatus {
    guarded(|| {
        if m.is_null() || out.is_null() {
            return fail(FluidmcStatus::NullArgument, "model or out is null");
        }
        if !(t_max.is_finite() && t_max >= 0.0) {
            return fail(FluidmcStatus::OutOfRange, format!("t_max {t_max} must be finite and nonnegative"));
        }
        match fluid::solve_fluid(&(*m).0, t_max, None) {
            Ok(traj) => {
                *out = Box::into_raw(Box::new(FluidmcTrajectory(traj)));
                FluidmcStatus::Ok
            }
            Err(e) => fail(FluidmcStatus::NumericError, e),
        }
    })
}

/// Releases a trajectory handle.
///
/// # Safety
/// `tr` must be null or a handle from [`fluidmc_fluid_solve`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_trajectory_free(tr: *mut FluidmcTrajectory) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// End of the covered time interval, or NaN if `tr` is null.
///
/// # Safety
/// `tr` must be null or a live trajectory handle.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_trajectory_t_end(tr: *const FluidmcTrajectory) -> f64 {
    if tr.is_null() {
        return f64::NAN;
    }
    (*tr).0.t_end()
}

/// Writes the state densities at `t` (clamped into the covered interval) to
/// `out`, which must hold exactly one `double` per agent state.
///
/// # Safety
/// `tr` must be a live trajectory handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_trajectory_eval(
    tr: *const FluidmcTrajectory,
    t: f64,
    out: *mut f64,
    len: usize,
) -> FluidmcStatus {
    guarded(|| {
        if tr.is_null() || out.is_null() {
            return fail(FluidmcStatus::NullArgument, "trajectory or out is null");
        }
        let traj = &(*tr).0;
        if len != traj.n_states() {
            return fail(
                FluidmcStatus::OutOfRange,
                format!("buffer length {len} does not match {} states", traj.n_states()),
            );
        }
        let buf = std::slice::from_raw_parts_mut(out, len);
        traj.eval(t, buf);
        FluidmcStatus::Ok
    })
}

/// Computes the fluid equilibrium and writes it to `out` (one `double` per
/// agent state). When `out_residual` is non-null it receives the sup norm of
/// the drift at the returned point.
///
/// # Safety
/// `m` must be a live model handle; `out` valid for `len` writes;
/// `out_residual` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_steady_state(
    m: *const FluidmcModel,
    out: *mut f64,
    len: usize,
    out_residual: *mut f64,
) -> FluidmcStatus {
    guarded(|| {
        if m.is_null() || out.is_null() {
            return fail(FluidmcStatus::NullArgument, "model or out is null");
        }
        let model = &(*m).0;
        if len != model.n_states() {
            return fail(
                FluidmcStatus::OutOfRange,
                format!("buffer length {len} does not match {} states", model.n_states()),
            );
        }
        match fluid::steady_state(model, &fluid::SteadyOpts::default()) {
            Ok(ss) => {
                std::slice::from_raw_parts_mut(out, len).copy_from_slice(&ss.x);
                if !out_residual.is_null() {
                    *out_residual = ss.residual;
                }
                FluidmcStatus::Ok
            }
            Err(e) => fail(FluidmcStatus::NumericError, e),
        }
    })
}

/// Checks one CSL or reward formula from initial state `s0` at time zero and
/// writes the outcome to `out`. A null `s0` selects the state with the
/// largest initial density.
///
/// # Safety
/// `m` must be a live model handle; `formula` a readable NUL-terminated
/// string; `s0` null or a readable NUL-terminated string; `out` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn fluidmc_check_formula(
    m: *const FluidmcModel,
    formula: *const c_char,
    s0: *const c_char,
    out: *mut FluidmcCheckResult,
) -> FluidmcStatus {
    guarded(|| {
        if m.is_null() || out.is_null() {
            return fail(FluidmcStatus::NullArgument, "model or out is null");
        }
        let model = &(*m).0;
        let text = match utf8_arg(formula, "formula") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let start = if s0.is_null() {
            default_state(model)
        } else {
            let name = match utf8_arg(s0, "s0") {
                Ok(t) => t,
                Err(s) => return s,
            };
            match model.agent.index_of(name) {
                Some(i) => i,
                None => return fail(FluidmcStatus::OutOfRange, format!("unknown state `{name}`")),
            }
        };
        let parsed = match csl::parse_formula(text, model) {
            Ok(f) => f,
            Err(e) => return fail(check_error_status(&e), e),
        };
        let evaluated = match &parsed {
            Formula::Prob { query, path } => {
                csl::check_path_probability(model, path, start, 0.0).map(|v| (v, query.decide(v)))
            }
            Formula::Reward { .. } => reward::evaluate_reward_formula(model, &parsed, start)
                .map(|(r, outcome)| (r.value, outcome)),
        };
        match evaluated {
            Ok((value, outcome)) => {
                let truth = match outcome {
                    CheckOutcome::True => FluidmcTruth::True,
                    CheckOutcome::False => FluidmcTruth::False,
                    CheckOutcome::Value(_) => FluidmcTruth::Value,
                    CheckOutcome::Indeterminate(_) => FluidmcTruth::Indeterminate,
                };
                *out = FluidmcCheckResult { value, truth };
                FluidmcStatus::Ok
            }
            Err(e) => fail(check_error_status(&e), e),
        }
    })
}

fn default_state(m: &PopulationModel) -> usize {
    let mut best = 0;
    for (i, &d) in m.init_density.iter().enumerate() {
        if d > m.init_density[best] {
            best = i;
        }
    }
    best
}
