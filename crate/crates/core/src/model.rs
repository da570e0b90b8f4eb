//! Model constants and the closed-form pieces of the reduced problem.
//!
//! The full value function splits as `u(t, x, s, alpha, q) = x + q s + v(t, alpha, q)`;
//! everything here works on the residual `v`.

use std::ops::Deref;

use crate::error::{Error, Result};

/// Raw model inputs. `Default` carries the reference experiment's values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Trading horizon `T`.
    pub horizon: f64,
    /// Price tick `sigma`, the size of one midprice jump.
    pub tick: f64,
    /// Baseline intensity `theta` of midprice jumps in each direction.
    pub base_intensity: f64,
    /// Half spread `Delta`; limit orders rest at `S +/- Delta`.
    pub half_spread: f64,
    /// Taker fee `eps` paid on top of the half spread by market orders.
    pub taker_fee: f64,
    /// Arrival rate of external market buys (hit the maker's ask).
    pub mo_buy_rate: f64,
    /// Arrival rate of external market sells (hit the maker's bid).
    pub mo_sell_rate: f64,
    /// OU mean-reversion speed `k` of the alpha signal.
    pub mean_reversion: f64,
    /// OU volatility `rho` of the alpha signal.
    pub signal_vol: f64,
    /// Alpha increment on every market buy.
    pub jump_up: f64,
    /// Alpha decrement on every market sell.
    pub jump_down: f64,
    /// Running inventory penalty `phi`.
    pub running_penalty: f64,
    /// Terminal inventory penalty `psi`.
    pub terminal_penalty: f64,
    /// Inventory bound `Qbar`.
    pub inventory_cap: i32,
    /// Alpha truncation bound `A`.
    pub alpha_cap: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            tick: 0.01,
            base_intensity: 0.1,
            half_spread: 0.005,
            taker_fee: 0.005,
            mo_buy_rate: 1.0,
            mo_sell_rate: 1.0,
            mean_reversion: 200.0,
            signal_vol: 1.0,
            jump_up: 60.0,
            jump_down: 60.0,
            running_penalty: 1e-6,
            terminal_penalty: 0.0,
            inventory_cap: 4,
            alpha_cap: 300.0,
        }
    }
}

/// Validated model constants. Read access to the inputs goes through `Deref`;
/// the liquidity cost `Upsilon = Delta + eps` is derived once and cannot drift.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    liquidity_cost: f64,
    warnings: Vec<String>,
}

impl Deref for ModelParams {
    type Target = ModelConfig;

    fn deref(&self) -> &ModelConfig {
        &self.config
    }
}

fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite and > 0, got {value}")))
    }
}

fn require_nonnegative(name: &'static str, value: f64, warnings: &mut Vec<String>) -> Result<()> {
    if !value.is_finite() || value < 0.0 {
        return Err(Error::invalid(name, format!("must be finite and >= 0, got {value}")));
    }
    if value == 0.0 {
        let msg = format!("{name} = 0; the model assumes a strictly positive value");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(())
}

impl ModelParams {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut warnings = Vec::new();
        require_positive("horizon", config.horizon)?;
        require_positive("tick", config.tick)?;
        require_positive("base_intensity", config.base_intensity)?;
        require_nonnegative("half_spread", config.half_spread, &mut warnings)?;
        require_positive("taker_fee", config.taker_fee)?;
        require_positive("mo_buy_rate", config.mo_buy_rate)?;
        require_positive("mo_sell_rate", config.mo_sell_rate)?;
        require_positive("mean_reversion", config.mean_reversion)?;
        require_positive("signal_vol", config.signal_vol)?;
        require_positive("jump_up", config.jump_up)?;
        require_positive("jump_down", config.jump_down)?;
        require_nonnegative("running_penalty", config.running_penalty, &mut warnings)?;
        require_nonnegative("terminal_penalty", config.terminal_penalty, &mut warnings)?;
        require_positive("alpha_cap", config.alpha_cap)?;
        if config.inventory_cap <= 0 {
            return Err(Error::invalid(
                "inventory_cap",
                format!("must be a positive integer, got {}", config.inventory_cap),
            ));
        }
        let liquidity_cost = config.half_spread + config.taker_fee;
        Ok(Self {
            config,
            liquidity_cost,
            warnings,
        })
    }

    /// The reference experiment's parameters.
    pub fn reference() -> Self {
        Self::new(ModelConfig::default()).expect("reference parameters are valid")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `Upsilon = Delta + eps`, the all-in cost of crossing the spread.
    pub fn liquidity_cost(&self) -> f64 {
        self.liquidity_cost
    }

    /// Non-fatal notes raised at construction (zero penalties or spread).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Running reward `alpha sigma q - phi q^2 + la lambda_a Delta + lb lambda_b Delta`.
pub fn running_reward(p: &ModelParams, alpha: f64, q: i32, la: bool, lb: bool) -> f64 {
    let q = f64::from(q);
    let mut reward = alpha * p.tick * q - p.running_penalty * q * q;
    if la {
        reward += p.mo_buy_rate * p.half_spread;
    }
    if lb {
        reward += p.mo_sell_rate * p.half_spread;
    }
    reward
}

/// Liquidation value of the residual inventory at the horizon.
pub fn terminal_value(p: &ModelParams, _alpha: f64, q: i32) -> f64 {
    let q = f64::from(q);
    -p.liquidity_cost() * q * sign(q) - p.terminal_penalty * q * q
}

/// Uniform lower and upper bounds `(U1(t), U2(t))` on the discrete solution.
pub fn stability_bounds(p: &ModelParams, t: f64) -> Result<(f64, f64)> {
    if !(0.0..=p.horizon).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: p.horizon,
        });
    }
    let qbar = f64::from(p.inventory_cap);
    let remaining = p.horizon - t;
    let signal_gain = p.tick * p.alpha_cap * qbar;
    let lower = -p.liquidity_cost() * qbar
        - p.terminal_penalty * qbar * qbar
        - remaining * (signal_gain + p.running_penalty * qbar * qbar);
    let upper = remaining * (p.half_spread * (p.mo_buy_rate + p.mo_sell_rate) + signal_gain);
    Ok((lower, upper))
}

/// `u = x + q s + v`.
pub fn reconstruct_full_value(cash: f64, price: f64, q: i32, v: f64) -> f64 {
    cash + f64::from(q) * price + v
}
