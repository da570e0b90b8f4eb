//! Discretization lattice, node indexing and the alpha-shift stencils.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Shift ratios closer than this to an integer are treated as exact lattice shifts.
const SHIFT_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub n_time_steps: usize,
    /// Total alpha nodes on `[-A, A]`; must be odd so that `alpha = 0` is a node.
    pub n_alpha_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_time_steps: 200,
            n_alpha_points: 101,
        }
    }
}

impl GridSpec {
    pub fn new(n_time_steps: usize, n_alpha_points: usize) -> Self {
        Self {
            n_time_steps,
            n_alpha_points,
        }
    }

    /// Halve both the time step and the alpha spacing.
    pub fn refined(&self) -> Self {
        Self {
            n_time_steps: 2 * self.n_time_steps,
            n_alpha_points: 2 * (self.n_alpha_points - 1) + 1,
        }
    }
}

/// How shifted alpha targets beyond `[-A, A]` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtrapolationMode {
    /// Evaluate at the nearest boundary node. Keeps every stencil weight nonnegative.
    #[default]
    Clamp,
    /// Two-point linear extrapolation from the two outermost nodes.
    Linear,
}

impl FromStr for ExtrapolationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp" => Ok(Self::Clamp),
            "linear" | "paper" => Ok(Self::Linear),
            other => Err(Error::Config(format!(
                "unknown extrapolation mode `{other}` (expected clamp or linear)"
            ))),
        }
    }
}

impl fmt::Display for ExtrapolationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clamp => "clamp",
            Self::Linear => "linear",
        })
    }
}

/// Time, alpha and inventory lattices. Nodes of one time level are flattened
/// q-major: `node = j * n_alpha + i` for alpha index `i` and inventory index `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    times: Vec<f64>,
    alphas: Vec<f64>,
    inventory_cap: i32,
    dt: f64,
    dalpha: f64,
}

pub fn build_grid(p: &ModelParams, spec: GridSpec) -> Result<Grid> {
    if spec.n_time_steps == 0 {
        return Err(Error::invalid("time_steps", "must be >= 1"));
    }
    if spec.n_alpha_points < 3 || spec.n_alpha_points.is_multiple_of(2) {
        return Err(Error::invalid(
            "alpha_points",
            format!("must be odd and >= 3, got {}", spec.n_alpha_points),
        ));
    }
    let n = spec.n_time_steps;
    let horizon = p.horizon;
    let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * horizon / n as f64).collect();
    times[n] = horizon;

    let half = (spec.n_alpha_points - 1) / 2;
    let cap = p.alpha_cap;
    let dalpha = cap / half as f64;
    let mut alphas = vec![0.0; spec.n_alpha_points];
    for k in 1..=half {
        let a = if k == half { cap } else { k as f64 * dalpha };
        alphas[half + k] = a;
        alphas[half - k] = -a;
    }
    Ok(Grid {
        times,
        alphas,
        inventory_cap: p.inventory_cap,
        dt: horizon / n as f64,
        dalpha,
    })
}

impl Grid {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dalpha(&self) -> f64 {
        self.dalpha
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_time_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn n_alpha(&self) -> usize {
        self.alphas.len()
    }

    /// `N_alpha`, the index of `alpha = 0`.
    pub fn alpha_center(&self) -> usize {
        self.alphas.len() / 2
    }

    pub fn inventory_cap(&self) -> i32 {
        self.inventory_cap
    }

    pub fn n_q(&self) -> usize {
        (2 * self.inventory_cap + 1) as usize
    }

    /// Number of nodes per time level, `M`.
    pub fn len(&self) -> usize {
        self.n_alpha() * self.n_q()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q_of(&self, j: usize) -> i32 {
        j as i32 - self.inventory_cap
    }

    pub fn q_index(&self, q: i32) -> Option<usize> {
        (q.abs() <= self.inventory_cap).then(|| (q + self.inventory_cap) as usize)
    }

    #[inline]
    pub fn flatten(&self, i: usize, j: usize) -> usize {
        j * self.n_alpha() + i
    }

    #[inline]
    pub fn unflatten(&self, node: usize) -> (usize, usize) {
        (node % self.n_alpha(), node / self.n_alpha())
    }

    /// Alpha index of the node nearest to `alpha` after truncation to `[-A, A]`.
    pub fn nearest_alpha_index(&self, alpha: f64) -> usize {
        let cap = self.alphas[self.alphas.len() - 1];
        let a = truncate_alpha(cap, alpha);
        let pos = (a / self.dalpha).round() as isize + self.alpha_center() as isize;
        pos.clamp(0, self.n_alpha() as isize - 1) as usize
    }

    /// Mirror node `(i, j) -> (-alpha_i, -q_j)`.
    pub fn reflect(&self, node: usize) -> usize {
        let (i, j) = self.unflatten(node);
        self.flatten(self.n_alpha() - 1 - i, self.n_q() - 1 - j)
    }
}

/// `min(A, max(-A, alpha))`.
pub fn truncate_alpha(cap: f64, alpha: f64) -> f64 {
    alpha.max(-cap).min(cap)
}

/// A linear functional over the alpha lattice at fixed inventory, evaluating
/// `v` at a shifted alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftStencil {
    pub entries: Vec<(usize, f64)>,
}

impl ShiftStencil {
    fn single(i: usize) -> Self {
        Self {
            entries: vec![(i, 1.0)],
        }
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, w)| w * values[i]).sum()
    }

    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.entries.iter().all(|&(_, w)| w >= 0.0)
    }
}

/// Shift in lattice units, snapped to an integer when within rounding noise.
fn lattice_shift(jump: f64, dalpha: f64) -> f64 {
    let s = jump / dalpha;
    let r = s.round();
    if (s - r).abs() < SHIFT_SNAP {
        r
    } else {
        s
    }
}

fn interpolate(lo: usize, hi: usize, frac: f64) -> ShiftStencil {
    if frac == 0.0 {
        ShiftStencil::single(lo)
    } else {
        ShiftStencil {
            entries: vec![(lo, 1.0 - frac), (hi, frac)],
        }
    }
}

/// Stencil for `v(alpha_i + gamma_a)`.
pub fn shift_stencil_up(g: &Grid, p: &ModelParams, i: usize, mode: ExtrapolationMode) -> ShiftStencil {
    let s = lattice_shift(p.jump_up, g.dalpha());
    let whole = s.floor();
    let frac = s - whole;
    let top = g.n_alpha() - 1;
    let base = i + whole as usize;
    if base < top || (base == top && frac == 0.0) {
        return interpolate(base, base + 1, frac);
    }
    match mode {
        ExtrapolationMode::Clamp => ShiftStencil::single(top),
        ExtrapolationMode::Linear => {
            let excess = s - (top - i) as f64;
            ShiftStencil {
                entries: vec![(top, 1.0 + excess), (top - 1, -excess)],
            }
        }
    }
}

/// Stencil for `v(alpha_i - gamma_b)`.
pub fn shift_stencil_down(g: &Grid, p: &ModelParams, i: usize, mode: ExtrapolationMode) -> ShiftStencil {
    let s = lattice_shift(p.jump_down, g.dalpha());
    let whole = s.floor();
    let frac = s - whole;
    let base = i as isize - whole as isize;
    if base > 0 || (base == 0 && frac == 0.0) {
        let base = base as usize;
        return interpolate(base, base.saturating_sub(1), frac);
    }
    match mode {
        ExtrapolationMode::Clamp => ShiftStencil::single(0),
        ExtrapolationMode::Linear => {
            let excess = s - i as f64;
            ShiftStencil {
                entries: vec![(0, 1.0 + excess), (1, -excess)],
            }
        }
    }
}

/// Up and down stencils for every alpha node, built once per grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencils {
    pub mode: ExtrapolationMode,
    pub up: Vec<ShiftStencil>,
    pub down: Vec<ShiftStencil>,
}

impl Stencils {
    pub fn new(g: &Grid, p: &ModelParams, mode: ExtrapolationMode) -> Self {
        Self {
            mode,
            up: (0..g.n_alpha()).map(|i| shift_stencil_up(g, p, i, mode)).collect(),
            down: (0..g.n_alpha()).map(|i| shift_stencil_down(g, p, i, mode)).collect(),
        }
    }
}
