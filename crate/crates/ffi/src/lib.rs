//! C interface to the `mmqvi` solver.
//!
//! Every function returns an [`MmqStatus`]; on failure the message is kept per
//! thread and can be read with [`mmq_last_error`]. Solutions are opaque handles
//! created by [`mmq_solve`] and released with [`mmq_solution_free`].

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mmqvi::grid::{ExtrapolationMode, GridSpec};
use mmqvi::model::{ModelConfig, ModelParams};
use mmqvi::montecarlo::{estimate_performance, InitialState, SimulationConfig};
use mmqvi::policy_iteration::{PiterConfig, Verification};
use mmqvi::solver::{solve, Solution};
use mmqvi::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    NumericalFailure = 4,
    SimulationFailure = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MmqModelParams {
    pub horizon: f64,
    pub tick: f64,
    pub base_intensity: f64,
    pub half_spread: f64,
    pub taker_fee: f64,
    pub mo_buy_rate: f64,
    pub mo_sell_rate: f64,
    pub mean_reversion: f64,
    pub signal_vol: f64,
    pub jump_up: f64,
    pub jump_down: f64,
    pub running_penalty: f64,
    pub terminal_penalty: f64,
    pub inventory_cap: i32,
    pub alpha_cap: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MmqGridSpec {
    pub time_steps: usize,
    /// Odd, at least 3.
    pub alpha_points: usize,
}

/// `extrapolation`: 0 clamp, 1 linear. `verification`: 0 off, 1 per step, 2 exhaustive.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MmqSolverOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub extrapolation: u32,
    pub verification: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MmqControl {
    pub ask: u8,
    pub bid: u8,
    pub market_order: u8,
    /// +1 buy, -1 sell; meaningful when `market_order` is 1.
    pub direction: i8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MmqEstimate {
    pub paths: usize,
    pub mean: f64,
    pub std_error: f64,
    pub predicted: f64,
    pub z_score: f64,
}

/// Opaque solved value function and policy.
pub struct MmqSolution {
    inner: Solution,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> MmqStatus {
    match err {
        Error::InvalidParameter { .. } | Error::Config(_) | Error::DimensionMismatch { .. } => MmqStatus::InvalidArgument,
        Error::TimeOutOfRange { .. } => MmqStatus::OutOfRange,
        Error::Simulation(_) => MmqStatus::SimulationFailure,
        Error::AtLevel { source, .. } => status_of(source),
        _ => MmqStatus::NumericalFailure,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MmqStatus, String)>) -> MmqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmqStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmqStatus::Panic
        }
    }
}

fn fail(err: Error) -> (MmqStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (MmqStatus, String) {
    (MmqStatus::NullPointer, format!("{what} is null"))
}

fn to_config(p: &MmqModelParams) -> ModelConfig {
    ModelConfig {
        horizon: p.horizon,
        tick: p.tick,
        base_intensity: p.base_intensity,
        half_spread: p.half_spread,
        taker_fee: p.taker_fee,
        mo_buy_rate: p.mo_buy_rate,
        mo_sell_rate: p.mo_sell_rate,
        mean_reversion: p.mean_reversion,
        signal_vol: p.signal_vol,
        jump_up: p.jump_up,
        jump_down: p.jump_down,
        running_penalty: p.running_penalty,
        terminal_penalty: p.terminal_penalty,
        inventory_cap: p.inventory_cap,
        alpha_cap: p.alpha_cap,
    }
}

/// Fills `out` with the reference parameters.
///
/// # Safety
/// `out` must be null or point to writable memory for one `MmqModelParams`.
#[no_mangle]
pub unsafe extern "C" fn mmq_default_params(out: *mut MmqModelParams) -> MmqStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let c = ModelConfig::default();
        *out = MmqModelParams {
            horizon: c.horizon,
            tick: c.tick,
            base_intensity: c.base_intensity,
            half_spread: c.half_spread,
            taker_fee: c.taker_fee,
            mo_buy_rate: c.mo_buy_rate,
            mo_sell_rate: c.mo_sell_rate,
            mean_reversion: c.mean_reversion,
            signal_vol: c.signal_vol,
            jump_up: c.jump_up,
            jump_down: c.jump_down,
            running_penalty: c.running_penalty,
            terminal_penalty: c.terminal_penalty,
            inventory_cap: c.inventory_cap,
            alpha_cap: c.alpha_cap,
        };
        Ok(())
    })
}

/// # Safety
/// `out` must be null or point to writable memory for one `MmqGridSpec`.
#[no_mangle]
pub unsafe extern "C" fn mmq_default_grid(out: *mut MmqGridSpec) -> MmqStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let g = GridSpec::default();
        *out = MmqGridSpec {
            time_steps: g.n_time_steps,
            alpha_points: g.n_alpha_points,
        };
        Ok(())
    })
}

/// # Safety
/// `out` must be null or point to writable memory for one `MmqSolverOptions`.
#[no_mangle]
pub unsafe extern "C" fn mmq_default_options(out: *mut MmqSolverOptions) -> MmqStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let c = PiterConfig::default();
        *out = MmqSolverOptions {
            tolerance: c.tolerance,
            max_iter: c.max_iter,
            extrapolation: 0,
            verification: 1,
        };
        Ok(())
    })
}

/// Solves backward from the horizon. On success `*out` owns a new handle.
///
/// # Safety
/// Pointer arguments must be null or valid; `options` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn mmq_solve(
    params: *const MmqModelParams,
    grid: *const MmqGridSpec,
    options: *const MmqSolverOptions,
    out: *mut *mut MmqSolution,
) -> MmqStatus {
    guard(|| {
        let params = unsafe { params.as_ref() }.ok_or_else(|| null("params"))?;
        let grid = unsafe { grid.as_ref() }.ok_or_else(|| null("grid"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = ptr::null_mut() };
        let mut cfg = PiterConfig::default();
        let mut mode = ExtrapolationMode::Clamp;
        if let Some(o) = unsafe { options.as_ref() } {
            cfg.tolerance = o.tolerance;
            cfg.max_iter = o.max_iter;
            mode = match o.extrapolation {
                0 => ExtrapolationMode::Clamp,
                1 => ExtrapolationMode::Linear,
                other => return Err((MmqStatus::InvalidArgument, format!("extrapolation code {other}"))),
            };
            cfg.verification = match o.verification {
                0 => Verification::Off,
                1 => Verification::PerStep,
                2 => Verification::Exhaustive,
                other => return Err((MmqStatus::InvalidArgument, format!("verification code {other}"))),
            };
        }
        let p = ModelParams::new(to_config(params)).map_err(fail)?;
        let sol = solve(&p, GridSpec::new(grid.time_steps, grid.alpha_points), mode, &cfg).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(MmqSolution { inner: sol })) };
        Ok(())
    })
}

/// Releases a handle from [`mmq_solve`]. Null is ignored.
///
/// # Safety
/// `sol` must come from `mmq_solve` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmq_solution_free(sol: *mut MmqSolution) {
    if !sol.is_null() {
        drop(unsafe { Box::from_raw(sol) });
    }
}

/// Time steps, alpha node count and inventory cap of a solution.
///
/// # Safety
/// `sol` must be a live handle; output pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mmq_solution_dims(
    sol: *const MmqSolution,
    time_steps: *mut usize,
    alpha_points: *mut usize,
    inventory_cap: *mut i32,
) -> MmqStatus {
    guard(|| {
        let sol = unsafe { sol.as_ref() }.ok_or_else(|| null("solution"))?;
        let g = sol.inner.grid();
        unsafe {
            if let Some(t) = time_steps.as_mut() {
                *t = g.n_time_steps();
            }
            if let Some(a) = alpha_points.as_mut() {
                *a = g.n_alpha();
            }
            if let Some(q) = inventory_cap.as_mut() {
                *q = g.inventory_cap();
            }
        }
        Ok(())
    })
}

fn locate(sol: &MmqSolution, level: usize, alpha_index: usize, q: i32, policy: bool) -> Result<usize, (MmqStatus, String)> {
    let g = sol.inner.grid();
    let levels = if policy { g.n_time_steps() } else { g.n_time_steps() + 1 };
    if level >= levels {
        return Err((MmqStatus::OutOfRange, format!("level {level} not below {levels}")));
    }
    if alpha_index >= g.n_alpha() {
        return Err((MmqStatus::OutOfRange, format!("alpha index {alpha_index}")));
    }
    let j = g
        .q_index(q)
        .ok_or_else(|| (MmqStatus::OutOfRange, format!("inventory {q} outside the cap")))?;
    Ok(g.flatten(alpha_index, j))
}

/// `v(t_level, alpha_index, q)`.
///
/// # Safety
/// `sol` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mmq_value(sol: *const MmqSolution, level: usize, alpha_index: usize, q: i32, out: *mut f64) -> MmqStatus {
    guard(|| {
        let sol = unsafe { sol.as_ref() }.ok_or_else(|| null("solution"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let node = locate(sol, level, alpha_index, q, false)?;
        *out = sol.inner.surface(level).values[node];
        Ok(())
    })
}

/// Copies the signal lattice into `buf` (length `alpha_points`).
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmq_alpha_nodes(sol: *const MmqSolution, buf: *mut f64, len: usize) -> MmqStatus {
    guard(|| {
        let sol = unsafe { sol.as_ref() }.ok_or_else(|| null("solution"))?;
        let alphas = sol.inner.grid().alphas();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < alphas.len() {
            return Err((MmqStatus::BufferTooSmall, format!("need {} entries", alphas.len())));
        }
        unsafe { ptr::copy_nonoverlapping(alphas.as_ptr(), buf, alphas.len()) };
        Ok(())
    })
}

/// Copies a whole level, inventory-major then alpha ascending, into `buf`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmq_value_surface(sol: *const MmqSolution, level: usize, buf: *mut f64, len: usize) -> MmqStatus {
    guard(|| {
        let sol = unsafe { sol.as_ref() }.ok_or_else(|| null("solution"))?;
        let levels = sol.inner.surfaces().len();
        if level >= levels {
            return Err((MmqStatus::OutOfRange, format!("level {level} not below {levels}")));
        }
        let values = &sol.inner.surface(level).values;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < values.len() {
            return Err((MmqStatus::BufferTooSmall, format!("need {} entries", values.len())));
        }
        unsafe { ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
        Ok(())
    })
}

/// Optimal control on `[t_level, t_{level+1})`.
///
/// # Safety
/// `sol` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mmq_control(
    sol: *const MmqSolution,
    level: usize,
    alpha_index: usize,
    q: i32,
    out: *mut MmqControl,
) -> MmqStatus {
    guard(|| {
        let sol = unsafe { sol.as_ref() }.ok_or_else(|| null("solution"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let node = locate(sol, level, alpha_index, q, true)?;
        let c = sol.inner.policy(level).controls[node];
        *out = MmqControl {
            ask: c.ask.into(),
            bid: c.bid.into(),
            market_order: c.intervene.into(),
            direction: c.impulse.sign() as i8,
        };
        Ok(())
    })
}

/// Monte Carlo estimate of the performance from `(cash, price, alpha, q)` at time 0.
///
/// # Safety
/// `sol` must be a live handle and `out` valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mmq_estimate(
    sol: *const MmqSolution,
    cash: f64,
    price: f64,
    alpha: f64,
    q: i32,
    paths: usize,
    seed: u64,
    out: *mut MmqEstimate,
) -> MmqStatus {
    guard(|| {
        let sol = unsafe { sol.as_ref() }.ok_or_else(|| null("solution"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let y0 = InitialState {
            cash,
            price,
            alpha,
            inventory: q,
        };
        let r = estimate_performance(&sol.inner, &y0, paths, seed, &SimulationConfig::default()).map_err(fail)?;
        *out = MmqEstimate {
            paths: r.paths,
            mean: r.mean,
            std_error: r.std_error,
            predicted: r.predicted,
            z_score: r.z_score,
        };
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL terminated and
/// truncated to fit. Returns the full message length plus one.
///
/// # Safety
/// `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mmq_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len() + 1
    })
}
