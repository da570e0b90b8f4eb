//! Path simulation of the full controlled market under a solved policy, used
//! to check `u = x + q s + v` by Monte Carlo.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{truncate_alpha, Grid};
use crate::model::{terminal_value, ModelParams};
use crate::scheme::Impulse;
use crate::solver::{ControlLaw, Solution};

/// Starting point `(x, s, alpha, q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialState {
    pub cash: f64,
    pub price: f64,
    pub alpha: f64,
    pub inventory: i32,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            cash: 0.0,
            price: 100.0,
            alpha: 0.0,
            inventory: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Sub-intervals per solver time step.
    pub substeps: usize,
    /// Let the maker's own market orders move alpha by the same jump as
    /// external orders. Off by default so the simulated process matches the
    /// equation that was solved, whose intervention operator leaves alpha fixed.
    pub impulse_moves_alpha: bool,
    /// Keep the trajectory and event log (costly for large runs).
    pub record: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            substeps: 1,
            impulse_moves_alpha: false,
            record: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// External market buy; `filled` when it hit the maker's ask.
    ExternalBuy { filled: bool },
    ExternalSell { filled: bool },
    OwnBuy,
    OwnSell,
    PriceJump { up: u64, down: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub cash_flow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePoint {
    pub time: f64,
    pub cash: f64,
    pub price: f64,
    pub alpha: f64,
    pub inventory: i32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub ask_fills: u64,
    pub bid_fills: u64,
    pub own_buys: u64,
    pub own_sells: u64,
    pub external_buys: u64,
    pub external_sells: u64,
    pub jumps_up: u64,
    pub jumps_down: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub initial: InitialState,
    pub trajectory: Vec<StatePoint>,
    pub events: Vec<Event>,
    pub counts: EventCounts,
    pub final_state: StatePoint,
    /// `-integral of phi Q^2`.
    pub running_cost: f64,
    /// Realised performance `running + X_T + Q_T (S_T - Upsilon sign Q_T) - psi Q_T^2`.
    pub objective: f64,
    /// Largest number of own market orders fired at one instant.
    pub max_burst: usize,
}

impl PathRecord {
    /// Final cash rebuilt from the event log; only meaningful when events were recorded.
    pub fn replay_cash(&self) -> f64 {
        self.initial.cash + self.events.iter().map(|e| e.cash_flow).sum::<f64>()
    }

    pub fn write_events(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "time\tkind\tcash_flow")?;
        for e in &self.events {
            writeln!(out, "{}\t{:?}\t{}", e.time, e.kind, e.cash_flow)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateReport {
    pub paths: usize,
    pub mean: f64,
    pub std_error: f64,
    pub predicted: f64,
    pub z_score: f64,
}

impl EstimateReport {
    pub fn within(&self, n_se: f64) -> bool {
        (self.mean - self.predicted).abs() <= n_se * self.std_error
    }
}

/// Mean, covariance terms of `(alpha_h, integral of alpha over [0, h])` for the OU signal.
#[derive(Debug, Clone, Copy)]
struct OuMoments {
    decay: f64,
    integral_weight: f64,
    var_alpha: f64,
    var_integral: f64,
    cov: f64,
}

impl OuMoments {
    fn new(k: f64, rho: f64, h: f64) -> Self {
        let x = k * h;
        let one_minus = -(-x).exp_m1();
        let rho2 = rho * rho;
        let bracket = if x < 1e-2 {
            x * x * x * (1.0 / 3.0 - x / 4.0 + 7.0 * x * x / 60.0)
        } else {
            x - 2.0 * one_minus - 0.5 * (-2.0 * x).exp_m1()
        };
        Self {
            decay: (-x).exp(),
            integral_weight: one_minus / k,
            var_alpha: -rho2 * (-2.0 * x).exp_m1() / (2.0 * k),
            var_integral: rho2 * bracket / (k * k * k),
            cov: rho2 * one_minus * one_minus / (2.0 * k * k),
        }
    }

    fn sample(&self, alpha: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let mean_a = alpha * self.decay;
        let mean_i = alpha * self.integral_weight;
        if self.var_alpha <= 0.0 {
            return (mean_a, mean_i);
        }
        let sa = self.var_alpha.sqrt();
        let beta = self.cov / sa;
        let resid = (self.var_integral - beta * beta).max(0.0).sqrt();
        (mean_a + sa * z1, mean_i + beta * z1 + resid * z2)
    }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

struct PathState<'a, C: ControlLaw + ?Sized> {
    p: &'a ModelParams,
    grid: &'a Grid,
    control: &'a C,
    cfg: &'a SimulationConfig,
    time: f64,
    cash: f64,
    price: f64,
    alpha: f64,
    inventory: i32,
    record: PathRecord,
}

impl<C: ControlLaw + ?Sized> PathState<'_, C> {
    fn point(&self) -> StatePoint {
        StatePoint {
            time: self.time,
            cash: self.cash,
            price: self.price,
            alpha: self.alpha,
            inventory: self.inventory,
        }
    }

    fn log(&mut self, kind: EventKind, cash_flow: f64) {
        if self.cfg.record {
            self.record.events.push(Event {
                time: self.time,
                kind,
                cash_flow,
            });
            let pt = self.point();
            self.record.trajectory.push(pt);
        }
    }

    fn cell(&self) -> Result<(usize, usize)> {
        let j = self.grid.q_index(self.inventory).ok_or_else(|| {
            Error::Simulation(format!("inventory {} outside the cap at t = {}", self.inventory, self.time))
        })?;
        Ok((self.grid.nearest_alpha_index(self.alpha), j))
    }

    fn bump_alpha(&mut self, delta: f64) {
        self.alpha = truncate_alpha(self.p.alpha_cap, self.alpha + delta);
    }

    /// Fires own market orders until the policy says continue.
    fn intervene(&mut self, level: usize) -> Result<()> {
        let limit = 2 * self.grid.inventory_cap() as usize;
        let mut burst = 0;
        let mut last: Option<Impulse> = None;
        loop {
            let (i, j) = self.cell()?;
            let c = self.control.control(level, i, j);
            if !c.intervene {
                break;
            }
            if last == Some(c.impulse.reversed()) {
                return Err(Error::Simulation(format!(
                    "opposing market orders at t = {} (alpha {}, q {})",
                    self.time, self.alpha, self.inventory
                )));
            }
            burst += 1;
            if burst > limit {
                return Err(Error::Simulation(format!(
                    "more than {limit} market orders at t = {}",
                    self.time
                )));
            }
            let ups = self.p.liquidity_cost();
            let flow = match c.impulse {
                Impulse::Buy => {
                    if self.inventory >= self.grid.inventory_cap() {
                        return Err(Error::Simulation(format!("market buy at the cap, t = {}", self.time)));
                    }
                    self.inventory += 1;
                    self.record.counts.own_buys += 1;
                    if self.cfg.impulse_moves_alpha {
                        self.bump_alpha(self.p.jump_up);
                    }
                    -(self.price + ups)
                }
                Impulse::Sell => {
                    if self.inventory <= -self.grid.inventory_cap() {
                        return Err(Error::Simulation(format!("market sell at the cap, t = {}", self.time)));
                    }
                    self.inventory -= 1;
                    self.record.counts.own_sells += 1;
                    if self.cfg.impulse_moves_alpha {
                        self.bump_alpha(-self.p.jump_down);
                    }
                    self.price - ups
                }
            };
            self.cash += flow;
            let kind = match c.impulse {
                Impulse::Buy => EventKind::OwnBuy,
                Impulse::Sell => EventKind::OwnSell,
            };
            self.log(kind, flow);
            last = Some(c.impulse);
        }
        self.record.max_burst = self.record.max_burst.max(burst);
        Ok(())
    }

    /// Signal, price and running cost over `[time, time + h]` without order arrivals.
    fn diffuse(&mut self, h: f64, rng: &mut ChaCha8Rng) {
        if h <= 0.0 {
            return;
        }
        let m = OuMoments::new(self.p.mean_reversion, self.p.signal_vol, h);
        let (a_new, integral) = m.sample(self.alpha, rng);
        let base = self.p.base_intensity * h;
        let up = poisson(base + integral.max(0.0), rng);
        let down = poisson(base + (-integral).max(0.0), rng);
        self.record.running_cost -= self.p.running_penalty * (self.inventory as f64).powi(2) * h;
        self.alpha = truncate_alpha(self.p.alpha_cap, a_new);
        self.time += h;
        if up + down > 0 {
            self.price += self.p.tick * (up as f64 - down as f64);
            self.record.counts.jumps_up += up;
            self.record.counts.jumps_down += down;
            self.log(EventKind::PriceJump { up, down }, 0.0);
        }
    }

    fn external_order(&mut self, level: usize, buy: bool) -> Result<()> {
        let (i, j) = self.cell()?;
        let c = self.control.control(level, i, j);
        let cap = self.grid.inventory_cap();
        let mut flow = 0.0;
        let filled;
        if buy {
            self.record.counts.external_buys += 1;
            filled = c.ask && !c.intervene && self.inventory > -cap;
            if filled {
                self.inventory -= 1;
                flow = self.price + self.p.half_spread;
                self.record.counts.ask_fills += 1;
            }
            self.bump_alpha(self.p.jump_up);
        } else {
            self.record.counts.external_sells += 1;
            filled = c.bid && !c.intervene && self.inventory < cap;
            if filled {
                self.inventory += 1;
                flow = -(self.price - self.p.half_spread);
                self.record.counts.bid_fills += 1;
            }
            self.bump_alpha(-self.p.jump_down);
        }
        self.cash += flow;
        let kind = if buy {
            EventKind::ExternalBuy { filled }
        } else {
            EventKind::ExternalSell { filled }
        };
        self.log(kind, flow);
        Ok(())
    }
}

fn check_start(grid: &Grid, y0: &InitialState) -> Result<()> {
    if grid.q_index(y0.inventory).is_none() {
        return Err(Error::invalid("inventory", format!("{} outside the cap", y0.inventory)));
    }
    if !(y0.cash.is_finite() && y0.price.is_finite() && y0.alpha.is_finite()) {
        return Err(Error::invalid("initial state", "non-finite component"));
    }
    Ok(())
}

/// Simulates one path on `[0, T]` under `control`, drawing randomness from `rng`.
pub fn simulate_with<C: ControlLaw + ?Sized>(
    p: &ModelParams,
    grid: &Grid,
    control: &C,
    y0: &InitialState,
    cfg: &SimulationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PathRecord> {
    check_start(grid, y0)?;
    if cfg.substeps == 0 {
        return Err(Error::invalid("substeps", "must be at least 1"));
    }
    let start = StatePoint {
        time: 0.0,
        cash: y0.cash,
        price: y0.price,
        alpha: truncate_alpha(p.alpha_cap, y0.alpha),
        inventory: y0.inventory,
    };
    let mut s = PathState {
        p,
        grid,
        control,
        cfg,
        time: 0.0,
        cash: start.cash,
        price: start.price,
        alpha: start.alpha,
        inventory: start.inventory,
        record: PathRecord {
            initial: *y0,
            trajectory: if cfg.record { vec![start] } else { Vec::new() },
            events: Vec::new(),
            counts: EventCounts::default(),
            final_state: start,
            running_cost: 0.0,
            objective: 0.0,
            max_burst: 0,
        },
    };
    let total_rate = p.mo_buy_rate + p.mo_sell_rate;
    let clock = Exp::new(total_rate).map_err(|e| Error::Simulation(e.to_string()))?;
    let buy_share = p.mo_buy_rate / total_rate;
    let times = grid.times();
    for level in 0..grid.n_time_steps() {
        let h = (times[level + 1] - times[level]) / cfg.substeps as f64;
        for sub in 0..cfg.substeps {
            let end = if sub + 1 == cfg.substeps {
                times[level + 1]
            } else {
                times[level] + (sub + 1) as f64 * h
            };
            s.intervene(level)?;
            loop {
                let wait: f64 = clock.sample(rng);
                if s.time + wait >= end {
                    let rest = end - s.time;
                    s.diffuse(rest, rng);
                    s.time = end;
                    break;
                }
                s.diffuse(wait, rng);
                let buy = rng.random::<f64>() < buy_share;
                s.external_order(level, buy)?;
                s.intervene(level)?;
            }
            if cfg.record {
                let pt = s.point();
                s.record.trajectory.push(pt);
            }
        }
    }
    let q = s.inventory;
    let final_state = s.point();
    let mut record = s.record;
    record.final_state = final_state;
    record.objective = record.running_cost + final_state.cash + q as f64 * final_state.price + terminal_value(p, final_state.alpha, q);
    Ok(record)
}

fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// One path under the solution's policy; `path` selects an independent stream of `seed`.
pub fn simulate_path(sol: &Solution, y0: &InitialState, seed: u64, path: u64, cfg: &SimulationConfig) -> Result<PathRecord> {
    let mut rng = path_rng(seed, path);
    simulate_with(sol.params(), sol.grid(), sol, y0, cfg, &mut rng)
}

/// Sample mean and standard error of the realised objective over `n_paths`
/// paths under `control`, compared against `predicted`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_with<C: ControlLaw + ?Sized>(
    p: &ModelParams,
    grid: &Grid,
    control: &C,
    y0: &InitialState,
    n_paths: usize,
    seed: u64,
    cfg: &SimulationConfig,
    predicted: f64,
) -> Result<EstimateReport> {
    if n_paths < 2 {
        return Err(Error::invalid("paths", "need at least 2 paths"));
    }
    let cfg = SimulationConfig {
        record: false,
        ..cfg.clone()
    };
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for path in 0..n_paths {
        let mut rng = path_rng(seed, path as u64);
        let rec = simulate_with(p, grid, control, y0, &cfg, &mut rng)?;
        let delta = rec.objective - mean;
        mean += delta / (path + 1) as f64;
        m2 += delta * (rec.objective - mean);
    }
    let variance = m2 / (n_paths - 1) as f64;
    let std_error = (variance / n_paths as f64).sqrt();
    let z_score = if std_error > 0.0 {
        (mean - predicted) / std_error
    } else if mean == predicted {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(EstimateReport {
        paths: n_paths,
        mean,
        std_error,
        predicted,
        z_score,
    })
}

/// `x0 + q0 s0 + v(0, alpha0, q0)`.
pub fn predicted_value(sol: &Solution, y0: &InitialState) -> f64 {
    y0.cash + y0.inventory as f64 * y0.price + sol.value_interpolated(0, y0.alpha, y0.inventory)
}

/// Monte Carlo estimate under the solution's own policy.
pub fn estimate_performance(
    sol: &Solution,
    y0: &InitialState,
    n_paths: usize,
    seed: u64,
    cfg: &SimulationConfig,
) -> Result<EstimateReport> {
    check_start(sol.grid(), y0)?;
    let predicted = predicted_value(sol, y0);
    estimate_with(sol.params(), sol.grid(), sol, y0, n_paths, seed, cfg, predicted)
}
