//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every model and grid key is
//! required, the remaining keys are optional. Unknown or repeated keys are errors.
//!
//! | key | meaning | unit |
//! |-----|---------|------|
//! | `horizon` | trading horizon | time |
//! | `tick` | midprice jump size | price |
//! | `base_intensity` | baseline jump intensity per direction | 1/time |
//! | `half_spread` | limit order offset from mid | price |
//! | `taker_fee` | extra cost of a market order | price |
//! | `mo_buy_rate`, `mo_sell_rate` | external market order rates | 1/time |
//! | `mean_reversion` | signal reversion speed | 1/time |
//! | `signal_vol` | signal volatility | signal/sqrt(time) |
//! | `jump_up`, `jump_down` | signal move per external buy / sell | signal |
//! | `running_penalty` | inventory penalty rate | value/(time q^2) |
//! | `terminal_penalty` | terminal inventory penalty | value/q^2 |
//! | `inventory_cap` | max absolute inventory | lots |
//! | `alpha_cap` | signal truncation bound | signal |
//! | `time_steps` | number of time steps | |
//! | `alpha_points` | odd number of signal nodes | |
//!
//! Optional: `piter_tolerance`, `piter_max_iter`, `solve_tolerance`,
//! `solve_max_iter`, `extrapolation`, `verify`, `seed`, `paths`,
//! `refine_rounds`, `explicit_time_steps`, `mc_substeps`, `impulse_moves_alpha`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{ExtrapolationMode, GridSpec};
use crate::model::{ModelConfig, ModelParams};
use crate::policy_iteration::{PiterConfig, Verification};

const MODEL_KEYS: [&str; 15] = [
    "horizon",
    "tick",
    "base_intensity",
    "half_spread",
    "taker_fee",
    "mo_buy_rate",
    "mo_sell_rate",
    "mean_reversion",
    "signal_vol",
    "jump_up",
    "jump_down",
    "running_penalty",
    "terminal_penalty",
    "inventory_cap",
    "alpha_cap",
];
const GRID_KEYS: [&str; 2] = ["time_steps", "alpha_points"];
const OPTIONAL_KEYS: [&str; 12] = [
    "piter_tolerance",
    "piter_max_iter",
    "solve_tolerance",
    "solve_max_iter",
    "extrapolation",
    "verify",
    "seed",
    "paths",
    "refine_rounds",
    "explicit_time_steps",
    "mc_substeps",
    "impulse_moves_alpha",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Solve,
    Validate,
    Refine,
    Baseline,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solve" => Ok(Self::Solve),
            "validate" => Ok(Self::Validate),
            "refine" => Ok(Self::Refine),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridSpec,
    pub piter: PiterConfig,
    pub extrapolation: ExtrapolationMode,
    pub mode: RunMode,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub paths: usize,
    pub refine_rounds: usize,
    /// Step count for the explicit baseline; `None` reuses `grid.n_time_steps`.
    pub explicit_time_steps: Option<usize>,
    pub mc_substeps: usize,
    pub impulse_moves_alpha: bool,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            grid: GridSpec::default(),
            piter: PiterConfig::default(),
            extrapolation: ExtrapolationMode::default(),
            mode: RunMode::default(),
            out_dir: PathBuf::from("out"),
            seed: 20240601,
            paths: 10_000,
            refine_rounds: 3,
            explicit_time_steps: None,
            mc_substeps: 1,
            impulse_moves_alpha: false,
            trace: false,
        }
    }
}

impl RunConfig {
    /// Checks every sub-configuration; returns validated model parameters.
    pub fn validate(&self) -> Result<ModelParams> {
        let p = ModelParams::new(self.model.clone())?;
        self.piter.validate()?;
        if self.paths < 2 && self.mode == RunMode::Validate {
            return Err(Error::invalid("paths", "need at least 2 paths"));
        }
        if self.mc_substeps == 0 {
            return Err(Error::invalid("mc_substeps", "must be at least 1"));
        }
        crate::grid::build_grid(&p, self.grid)?;
        Ok(p)
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{raw}': {e}")))
}

/// Parses config text on top of `RunConfig::default()`.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
        let key = key.trim();
        let known = MODEL_KEYS.contains(&key) || GRID_KEYS.contains(&key) || OPTIONAL_KEYS.contains(&key);
        if !known {
            return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
        }
        if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    for key in MODEL_KEYS.iter().chain(GRID_KEYS.iter()) {
        if !entries.contains_key(*key) {
            return Err(Error::Config(format!("missing required key '{key}'")));
        }
    }
    let f = |key: &str| parse_value::<f64>(key, &entries[key]);
    let model = ModelConfig {
        horizon: f("horizon")?,
        tick: f("tick")?,
        base_intensity: f("base_intensity")?,
        half_spread: f("half_spread")?,
        taker_fee: f("taker_fee")?,
        mo_buy_rate: f("mo_buy_rate")?,
        mo_sell_rate: f("mo_sell_rate")?,
        mean_reversion: f("mean_reversion")?,
        signal_vol: f("signal_vol")?,
        jump_up: f("jump_up")?,
        jump_down: f("jump_down")?,
        running_penalty: f("running_penalty")?,
        terminal_penalty: f("terminal_penalty")?,
        inventory_cap: parse_value("inventory_cap", &entries["inventory_cap"])?,
        alpha_cap: f("alpha_cap")?,
    };
    let mut cfg = RunConfig {
        model,
        grid: GridSpec::new(
            parse_value("time_steps", &entries["time_steps"])?,
            parse_value("alpha_points", &entries["alpha_points"])?,
        ),
        ..RunConfig::default()
    };
    let get = |key: &str| entries.get(key).map(String::as_str);
    if let Some(v) = get("piter_tolerance") {
        cfg.piter.tolerance = parse_value("piter_tolerance", v)?;
    }
    if let Some(v) = get("piter_max_iter") {
        cfg.piter.max_iter = parse_value("piter_max_iter", v)?;
    }
    if let Some(v) = get("solve_tolerance") {
        cfg.piter.solve.tol = parse_value("solve_tolerance", v)?;
    }
    if let Some(v) = get("solve_max_iter") {
        cfg.piter.solve.max_iter = parse_value("solve_max_iter", v)?;
    }
    if let Some(v) = get("extrapolation") {
        cfg.extrapolation = parse_value("extrapolation", v)?;
    }
    if let Some(v) = get("verify") {
        cfg.piter.verification = parse_value::<Verification>("verify", v)?;
    }
    if let Some(v) = get("seed") {
        cfg.seed = parse_value("seed", v)?;
    }
    if let Some(v) = get("paths") {
        cfg.paths = parse_value("paths", v)?;
    }
    if let Some(v) = get("refine_rounds") {
        cfg.refine_rounds = parse_value("refine_rounds", v)?;
    }
    if let Some(v) = get("explicit_time_steps") {
        cfg.explicit_time_steps = Some(parse_value("explicit_time_steps", v)?);
    }
    if let Some(v) = get("mc_substeps") {
        cfg.mc_substeps = parse_value("mc_substeps", v)?;
    }
    if let Some(v) = get("impulse_moves_alpha") {
        cfg.impulse_moves_alpha = parse_value("impulse_moves_alpha", v)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Renders the model and grid part of `cfg` in the file format.
pub fn render_config(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    put("horizon", m.horizon.to_string());
    put("tick", m.tick.to_string());
    put("base_intensity", m.base_intensity.to_string());
    put("half_spread", m.half_spread.to_string());
    put("taker_fee", m.taker_fee.to_string());
    put("mo_buy_rate", m.mo_buy_rate.to_string());
    put("mo_sell_rate", m.mo_sell_rate.to_string());
    put("mean_reversion", m.mean_reversion.to_string());
    put("signal_vol", m.signal_vol.to_string());
    put("jump_up", m.jump_up.to_string());
    put("jump_down", m.jump_down.to_string());
    put("running_penalty", m.running_penalty.to_string());
    put("terminal_penalty", m.terminal_penalty.to_string());
    put("inventory_cap", m.inventory_cap.to_string());
    put("alpha_cap", m.alpha_cap.to_string());
    put("time_steps", cfg.grid.n_time_steps.to_string());
    put("alpha_points", cfg.grid.n_alpha_points.to_string());
    s
}
