//! C ABI over the `capdrop` library.
//!
//! Every fallible function returns a [`CapdropStatus`] and writes its result
//! through an out-pointer. On failure the message is available from
//! [`capdrop_last_error`] on the same thread until the next failing call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use capdrop::controller::compute_schedule;
use capdrop::harness::{run_scenario, Simulation};
use capdrop::model::FlowParams;
use capdrop::theory::{check_theorem_conditions, default_gamma_grid};
use capdrop::{Error, Scenario};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapdropStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Domain = 5,
    InvariantViolation = 6,
    Estimation = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

impl From<&Error> for CapdropStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => CapdropStatus::Domain,
            Error::InvalidParams(_) | Error::InvalidMu1(_) => CapdropStatus::InvalidArgument,
            Error::InvariantViolation { .. } => CapdropStatus::InvariantViolation,
            Error::SampleRejected(_)
            | Error::DegenerateEstimate(_)
            | Error::WrongSampleCount { .. }
            | Error::UndefinedNormalization(_) => CapdropStatus::Estimation,
            Error::InternalConsistency(_) => CapdropStatus::Internal,
            Error::Config(_) => CapdropStatus::Config,
            Error::Io(_) => CapdropStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (CapdropStatus, String)>) -> CapdropStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CapdropStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CapdropStatus::Panic
        }
    }
}

fn lib<T>(r: capdrop::Result<T>) -> Result<T, (CapdropStatus, String)> {
    r.map_err(|e| (CapdropStatus::from(&e), e.to_string()))
}

fn null(what: &str) -> (CapdropStatus, String) {
    (CapdropStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CapdropStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (CapdropStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (CapdropStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (CapdropStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn capdrop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn capdrop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque validated scenario.
pub struct CapdropScenario(Scenario);

/// Opaque running simulation.
pub struct CapdropSimulation(Simulation);

/// Parses a TOML scenario. Free the result with `capdrop_scenario_free`.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_scenario_from_toml(
    toml: *const c_char,
    out_scenario: *mut *mut CapdropScenario,
) -> CapdropStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let slot = out(out_scenario, "out_scenario")?;
        let sc = lib(Scenario::from_toml_str(text))?;
        *slot = Box::into_raw(Box::new(CapdropScenario(sc)));
        Ok(())
    })
}

/// Reads and parses a TOML scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_scenario_from_path(
    path: *const c_char,
    out_scenario: *mut *mut CapdropScenario,
) -> CapdropStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let slot = out(out_scenario, "out_scenario")?;
        let sc = lib(Scenario::from_path(p))?;
        *slot = Box::into_raw(Box::new(CapdropScenario(sc)));
        Ok(())
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `scenario` must come from a `capdrop_scenario_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn capdrop_scenario_set_seed(scenario: *mut CapdropScenario, seed: u64) -> CapdropStatus {
    guard(|| {
        out(scenario, "scenario")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `scenario` must be NULL or come from a `capdrop_scenario_*` constructor,
/// and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn capdrop_scenario_free(scenario: *mut CapdropScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapdropSchedule {
    pub t_clean: [u64; 4],
    pub t_release: u64,
    pub k: u64,
    pub t_round: u64,
}

/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_schedule(
    scenario: *const CapdropScenario,
    out_schedule: *mut CapdropSchedule,
) -> CapdropStatus {
    guard(|| {
        let sc = &handle(scenario, "scenario")?.0;
        let slot = out(out_schedule, "out_schedule")?;
        let s = lib(compute_schedule(&sc.prior, sc.estimator.k))?;
        *slot = CapdropSchedule { t_clean: s.t_clean, t_release: s.t_release, k: s.k as u64, t_round: s.t_round };
        Ok(())
    })
}

/// Noise-free discharge `f(x0)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_flow_function(
    alpha: f64,
    x0_clean: f64,
    x0_c: f64,
    r: f64,
    x0: f64,
    out_value: *mut f64,
) -> CapdropStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let f = lib(FlowParams::new(alpha, x0_clean, x0_c, r))?;
        *slot = lib(f.flow(x0))?;
        Ok(())
    })
}

/// Stationary bound on the expected squared normalized estimation error.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_error_bound_y(
    lambda: f64,
    sigma2: f64,
    r: f64,
    alpha: f64,
    gap: f64,
    out_value: *mut f64,
) -> CapdropStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        *slot = lib(capdrop::theory::error_bound_y(lambda, sigma2, r, alpha, gap))?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapdropTheoremReport {
    pub y: f64,
    pub sigma2: f64,
    pub demand_mean: f64,
    pub r_tilde: f64,
    pub r_tilde_ci: f64,
    pub a_max: f64,
    pub cond_ii_bound: f64,
    pub gamma_used: f64,
    pub rhs_iii: f64,
    pub kappa: f64,
    pub p: f64,
    pub p_prime: f64,
    pub beta: f64,
    pub cond_i: bool,
    pub cond_ii: bool,
    pub cond_iii: bool,
}

/// Evaluates the stability conditions. `rollouts == 0` keeps the configured count.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_check_theorem(
    scenario: *const CapdropScenario,
    rollouts: u64,
    out_report: *mut CapdropTheoremReport,
) -> CapdropStatus {
    guard(|| {
        let sc = &handle(scenario, "scenario")?.0;
        let slot = out(out_report, "out_report")?;
        let mut opts = sc.theory_options();
        if rollouts > 0 {
            opts.rollouts = rollouts as usize;
        }
        let t = lib(check_theorem_conditions(&sc.theory_inputs(), &default_gamma_grid(), &opts))?;
        *slot = CapdropTheoremReport {
            y: t.y,
            sigma2: t.sigma2,
            demand_mean: t.demand_mean,
            r_tilde: t.r_tilde,
            r_tilde_ci: t.r_tilde_ci,
            a_max: t.a_max,
            cond_ii_bound: t.cond_ii_bound,
            gamma_used: t.gamma_used,
            rhs_iii: t.rhs_iii,
            kappa: t.kappa.kappa,
            p: t.kappa.p,
            p_prime: t.kappa.p_prime,
            beta: t.beta,
            cond_i: t.cond_i,
            cond_ii: t.cond_ii,
            cond_iii: t.cond_iii,
        };
        Ok(())
    })
}

/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer. The
/// simulation keeps its own copy of the scenario.
#[no_mangle]
pub unsafe extern "C" fn capdrop_simulation_new(
    scenario: *const CapdropScenario,
    replication: u64,
    out_simulation: *mut *mut CapdropSimulation,
) -> CapdropStatus {
    guard(|| {
        let sc = &handle(scenario, "scenario")?.0;
        let slot = out(out_simulation, "out_simulation")?;
        let sim = lib(Simulation::new(sc, replication))?;
        *slot = Box::into_raw(Box::new(CapdropSimulation(sim)));
        Ok(())
    })
}

/// # Safety
/// `simulation` must be NULL or a live handle, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn capdrop_simulation_free(simulation: *mut CapdropSimulation) {
    if !simulation.is_null() {
        drop(Box::from_raw(simulation));
    }
}

/// One step of plant, controller and estimator.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapdropStepRecord {
    pub t: u64,
    pub x0: f64,
    pub l1: f64,
    pub q: f64,
    pub outflow: f64,
    pub a: f64,
    pub b: f64,
    pub b_s: f64,
    pub b_qs: f64,
    pub b_bq: f64,
    pub round: u64,
    /// NaN outside steering and release phases.
    pub x0_set: f64,
    /// NaN when ground truth is unavailable.
    pub e2norm: f64,
    /// A round finished on this step.
    pub round_complete: bool,
}

/// # Safety
/// `simulation` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_simulation_step(
    simulation: *mut CapdropSimulation,
    out_record: *mut CapdropStepRecord,
) -> CapdropStatus {
    guard(|| {
        let sim = &mut out(simulation, "simulation")?.0;
        let slot = out(out_record, "out_record")?;
        let rec = lib(sim.step())?;
        let r = &rec.row;
        *slot = CapdropStepRecord {
            t: r.t,
            x0: r.x0,
            l1: r.l1,
            q: r.q,
            outflow: r.outflow,
            a: r.a,
            b: r.b,
            b_s: r.b_s,
            b_qs: r.b_qs,
            b_bq: r.b_bq,
            round: r.round,
            x0_set: r.x0_set.unwrap_or(f64::NAN),
            e2norm: r.e2norm.unwrap_or(f64::NAN),
            round_complete: rec.round.is_some(),
        };
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapdropEstimates {
    pub alpha_hat: f64,
    pub f_max_hat: f64,
    pub r_hat: f64,
    pub eps_max_hat: f64,
    pub rounds: u64,
}

/// # Safety
/// `simulation` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_simulation_estimates(
    simulation: *const CapdropSimulation,
    out_estimates: *mut CapdropEstimates,
) -> CapdropStatus {
    guard(|| {
        let sim = &handle(simulation, "simulation")?.0;
        let slot = out(out_estimates, "out_estimates")?;
        let e = sim.estimates();
        *slot = CapdropEstimates {
            alpha_hat: e.alpha_hat,
            f_max_hat: e.f_max_hat,
            r_hat: e.r_hat,
            eps_max_hat: e.eps_max_hat,
            rounds: e.n,
        };
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapdropRunSummary {
    pub steps: u64,
    pub time_avg_l1: f64,
    pub throughput: f64,
    pub delay_proxy_s: f64,
    pub rounds: u64,
    /// NaN when unavailable.
    pub tail_e2: f64,
    pub max_mass_residual: f64,
    pub clean_violations: u64,
    pub skipped_updates: u64,
}

/// Runs one full replication without recording trajectories.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capdrop_run(
    scenario: *const CapdropScenario,
    replication: u64,
    out_summary: *mut CapdropRunSummary,
) -> CapdropStatus {
    guard(|| {
        let sc = &handle(scenario, "scenario")?.0;
        let slot = out(out_summary, "out_summary")?;
        let s = lib(run_scenario(sc, replication, false))?.summary;
        *slot = CapdropRunSummary {
            steps: s.steps,
            time_avg_l1: s.time_avg_l1,
            throughput: s.throughput,
            delay_proxy_s: s.delay_proxy_s,
            rounds: s.rounds,
            tail_e2: s.tail_e2.unwrap_or(f64::NAN),
            max_mass_residual: s.max_mass_residual,
            clean_violations: s.controller.clean_violations,
            skipped_updates: s.skipped_updates,
        };
        Ok(())
    })
}
