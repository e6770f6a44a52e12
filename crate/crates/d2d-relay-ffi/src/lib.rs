//! C ABI over the `d2d-relay` crate.
//!
//! Every fallible call returns a [`D2dStatus`]. On failure the message is
//! kept per thread and can be read with [`d2d_last_error_message`]. Objects
//! are opaque handles created by `*_new`/`*_from_*`/`*_run`/`*_solve` calls
//! and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use d2d_relay::allocator::{solve_nominal, AllocationProblem, Solved, SolverOptions};
use d2d_relay::harness::{emit_results, run_experiment, ExperimentSpec, OutputFormat, RunMetrics};
use d2d_relay::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    DegenerateLink = 5,
    InfeasibleGeometry = 6,
    TooLarge = 7,
    Domain = 8,
    Io = 9,
    OutOfRange = 10,
    Panic = 11,
}

impl From<&Error> for D2dStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => D2dStatus::InvalidInput,
            Error::DegenerateLink(_) => D2dStatus::DegenerateLink,
            Error::InfeasibleGeometry(_) => D2dStatus::InfeasibleGeometry,
            Error::Config(_) => D2dStatus::Config,
            Error::TooLarge(_) => D2dStatus::TooLarge,
            Error::Domain(_) => D2dStatus::Domain,
            Error::Io(_) => D2dStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(D2dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(D2dStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> D2dStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => D2dStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            D2dStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(D2dStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(D2dStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn d2d_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn d2d_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Experiment description.
pub struct D2dExperiment(ExperimentSpec);

/// Metrics of a finished experiment.
pub struct D2dResults(Vec<RunMetrics>);

/// One relay's allocation problem.
pub struct D2dProblem(AllocationProblem);

/// Allocation returned by the solver.
pub struct D2dSolution(Solved);

/// Parse an experiment spec file's text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_experiment_from_toml(text: *const c_char, out: *mut *mut D2dExperiment) -> D2dStatus {
    guard(|| {
        let spec = ExperimentSpec::from_toml(read_str(text, "text")?)?;
        put(out, D2dExperiment(spec))
    })
}

/// Override the number of drops and the master seed.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn d2d_experiment_set_drops(exp: *mut D2dExperiment, num_drops: usize, master_seed: u64) -> D2dStatus {
    guard(|| {
        let e = exp.as_mut().ok_or_else(|| null("experiment"))?;
        let mut spec = e.0.clone();
        spec.num_drops = num_drops;
        spec.master_seed = master_seed;
        spec.validate()?;
        e.0 = spec;
        Ok(())
    })
}

/// # Safety
/// `exp` must come from [`d2d_experiment_from_toml`] or be null.
#[no_mangle]
pub unsafe extern "C" fn d2d_experiment_free(exp: *mut D2dExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Run every drop of every sweep value. `workers = 0` uses every core.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_experiment_run(exp: *const D2dExperiment, workers: usize, out: *mut *mut D2dResults) -> D2dStatus {
    guard(|| {
        let e = get(exp, "experiment")?;
        put(out, D2dResults(run_experiment(&e.0, workers)?))
    })
}

/// Numeric fields of one result row. `rate_gain_pct` is +inf when
/// `rate_gain_undefined` is set.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct D2dMetricsRow {
    pub has_sweep_value: bool,
    pub sweep_value: f64,
    pub num_drops: usize,
    pub mean_rate_per_ue: f64,
    pub mean_d2d_rate: f64,
    pub ref_d2d_rate: f64,
    pub rate_gain_pct: f64,
    pub rate_gain_undefined: bool,
    pub sum_rate: f64,
    pub r_delta: f64,
    pub iters_median: f64,
    pub iters_p90: f64,
    pub iters_max: usize,
    pub converged_drops: usize,
    pub infeasible_drops: usize,
}

/// Number of rows; 0 for a null handle.
///
/// # Safety
/// `res` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn d2d_results_len(res: *const D2dResults) -> usize {
    res.as_ref().map_or(0, |r| r.0.len())
}

/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_results_row(res: *const D2dResults, index: usize, out: *mut D2dMetricsRow) -> D2dStatus {
    guard(|| {
        let r = get(res, "results")?;
        let m = r
            .0
            .get(index)
            .ok_or_else(|| Fail(D2dStatus::OutOfRange, format!("row {index} of {}", r.0.len())))?;
        write(
            out,
            D2dMetricsRow {
                has_sweep_value: m.sweep_value.is_some(),
                sweep_value: m.sweep_value.unwrap_or(f64::NAN),
                num_drops: m.num_drops,
                mean_rate_per_ue: m.mean_rate_per_ue,
                mean_d2d_rate: m.mean_d2d_rate,
                ref_d2d_rate: m.ref_d2d_rate,
                rate_gain_pct: m.rate_gain_pct.unwrap_or(f64::INFINITY),
                rate_gain_undefined: m.rate_gain_pct.is_none(),
                sum_rate: m.sum_rate,
                r_delta: m.r_delta,
                iters_median: m.iters_median,
                iters_p90: m.iters_p90,
                iters_max: m.iters_max,
                converged_drops: m.converged_drops,
                infeasible_drops: m.infeasible_drops,
            },
        )
    })
}

/// Results as CSV text; release with [`d2d_string_free`].
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_results_to_csv(res: *const D2dResults, out: *mut *mut c_char) -> D2dStatus {
    guard(|| {
        let r = get(res, "results")?;
        let mut buf = Vec::new();
        emit_results(&r.0, OutputFormat::Csv, &mut buf)?;
        let s = CString::new(buf).map_err(|_| Fail(D2dStatus::Io, "NUL in CSV".into()))?;
        write(out, s.into_raw())
    })
}

/// # Safety
/// `res` must come from [`d2d_experiment_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn d2d_results_free(res: *mut D2dResults) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Parse a problem from its JSON form (as written by `dump-drop`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_problem_from_json(json: *const c_char, out: *mut *mut D2dProblem) -> D2dStatus {
    guard(|| {
        let p: AllocationProblem = serde_json::from_str(read_str(json, "json")?)
            .map_err(|e| Fail(D2dStatus::InvalidInput, e.to_string()))?;
        p.validate()?;
        put(out, D2dProblem(p))
    })
}

/// # Safety
/// `p` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_problem_dims(p: *const D2dProblem, num_ues: *mut usize, num_rbs: *mut usize) -> D2dStatus {
    guard(|| {
        let p = get(p, "problem")?;
        write(num_ues, p.0.num_ues())?;
        write(num_rbs, p.0.num_rbs())
    })
}

/// # Safety
/// `p` must come from [`d2d_problem_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn d2d_problem_free(p: *mut D2dProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Solver settings; start from [`d2d_solver_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct D2dSolverOptions {
    pub step_a: f64,
    pub t_max: usize,
    pub epsilon: f64,
    pub mult_init: f64,
    pub lambda_ceiling: f64,
}

#[no_mangle]
pub extern "C" fn d2d_solver_options_default() -> D2dSolverOptions {
    let o = SolverOptions::default();
    D2dSolverOptions {
        step_a: o.step_a,
        t_max: o.t_max,
        epsilon: o.epsilon,
        mult_init: o.mult_init,
        lambda_ceiling: o.lambda_ceiling,
    }
}

/// Solve without uncertainty protection. `opts` may be null for defaults.
///
/// # Safety
/// `p` must be a live handle; `opts` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_solve_nominal(
    p: *const D2dProblem,
    opts: *const D2dSolverOptions,
    out: *mut *mut D2dSolution,
) -> D2dStatus {
    guard(|| {
        let p = get(p, "problem")?;
        let o = opts.as_ref().map_or_else(SolverOptions::default, |o| SolverOptions {
            step_a: o.step_a,
            t_max: o.t_max,
            epsilon: o.epsilon,
            mult_init: o.mult_init,
            lambda_ceiling: o.lambda_ceiling,
        });
        put(out, D2dSolution(solve_nominal(&p.0, &o)?))
    })
}

/// Summary of a solution.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct D2dSolutionSummary {
    pub sum_rate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub infeasible: bool,
}

/// # Safety
/// `s` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_solution_summary(s: *const D2dSolution, out: *mut D2dSolutionSummary) -> D2dStatus {
    guard(|| {
        let s = &get(s, "solution")?.0.solution;
        write(
            out,
            D2dSolutionSummary {
                sum_rate: s.sum_rate,
                iterations: s.iterations,
                converged: s.converged,
                infeasible: s.infeasible,
            },
        )
    })
}

/// Achieved rate of one user in bit/s.
///
/// # Safety
/// `s` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_solution_user_rate(s: *const D2dSolution, ue: usize, out: *mut f64) -> D2dStatus {
    guard(|| {
        let s = &get(s, "solution")?.0.solution;
        let r = *s
            .rate
            .get(ue)
            .ok_or_else(|| Fail(D2dStatus::OutOfRange, format!("user {ue} of {}", s.rate.len())))?;
        write(out, r)
    })
}

/// User holding `rb`, or -1 when the RB is idle.
///
/// # Safety
/// `s` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_solution_rb_owner(s: *const D2dSolution, rb: usize, out: *mut i64) -> D2dStatus {
    guard(|| {
        let s = &get(s, "solution")?.0.solution;
        let n = s.x.first().map_or(0, Vec::len);
        if rb >= n {
            return Err(Fail(D2dStatus::OutOfRange, format!("RB {rb} of {n}")));
        }
        write(out, s.owner(rb).map_or(-1, |u| u as i64))
    })
}

/// First- and second-hop powers of `ue` on `rb` in watts.
///
/// # Safety
/// `s` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_solution_powers(
    s: *const D2dSolution,
    ue: usize,
    rb: usize,
    p1: *mut f64,
    p2: *mut f64,
) -> D2dStatus {
    guard(|| {
        let s = &get(s, "solution")?.0.solution;
        let (a, b) = s
            .p1
            .get(ue)
            .and_then(|r| r.get(rb))
            .zip(s.p2.get(ue).and_then(|r| r.get(rb)))
            .ok_or_else(|| Fail(D2dStatus::OutOfRange, format!("user {ue}, RB {rb}")))?;
        write(p1, *a)?;
        write(p2, *b)
    })
}

/// # Safety
/// `s` must come from [`d2d_solve_nominal`] or be null.
#[no_mangle]
pub unsafe extern "C" fn d2d_solution_free(s: *mut D2dSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
