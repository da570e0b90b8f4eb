//! Backward time stepping over all levels, the explicit baseline and the
//! grid-refinement study.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::grid::{build_grid, ExtrapolationMode, Grid, GridSpec};
use crate::model::{stability_bounds, terminal_value, ModelParams};
use crate::policy_iteration::{iterate, PiterConfig, PiterTrace, StopReason};
use crate::scheme::{impulse_target, Impulse, NodeControl, Policy, Scheme};

/// Slack on the stability envelope check.
pub const ENVELOPE_SLACK: f64 = 1e-8;

/// `v(t_n, ., .)` on the lattice, flattened like [`Grid`] nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub level: usize,
    pub time: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub interventions: usize,
}

/// Anything that can hand out a control for `(level, alpha index, q index)`.
pub trait ControlLaw {
    fn control(&self, level: usize, alpha_index: usize, q_index: usize) -> NodeControl;
}

/// Never quotes, never intervenes.
pub struct NullControl;

impl ControlLaw for NullControl {
    fn control(&self, _: usize, _: usize, _: usize) -> NodeControl {
        NodeControl::IDLE
    }
}

/// Value surfaces for levels `0..=N` and policies for levels `0..N`, both indexed by level.
#[derive(Debug, Clone)]
pub struct Solution {
    scheme: Scheme,
    surfaces: Vec<ValueSurface>,
    policies: Vec<Policy>,
    pub stats: Vec<LevelStats>,
    pub traces: Vec<PiterTrace>,
    pub elapsed: Duration,
}

impl Solution {
    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    pub fn grid(&self) -> &Grid {
        self.scheme.grid()
    }

    pub fn params(&self) -> &ModelParams {
        self.scheme.params()
    }

    pub fn surfaces(&self) -> &[ValueSurface] {
        &self.surfaces
    }

    pub fn surface(&self, level: usize) -> &ValueSurface {
        &self.surfaces[level]
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn policy(&self, level: usize) -> &Policy {
        &self.policies[level]
    }

    pub fn value(&self, level: usize, alpha_index: usize, q: i32) -> f64 {
        let g = self.grid();
        let j = g.q_index(q).expect("inventory inside the cap");
        self.surfaces[level].values[g.flatten(alpha_index, j)]
    }

    /// `v(t_level, alpha, q)`, linear in alpha between nodes and flat outside `[-A, A]`.
    pub fn value_interpolated(&self, level: usize, alpha: f64, q: i32) -> f64 {
        let g = self.grid();
        let a = crate::grid::truncate_alpha(g.alphas()[g.n_alpha() - 1], alpha);
        let pos = a / g.dalpha() + g.alpha_center() as f64;
        let lo = (pos.floor().max(0.0) as usize).min(g.n_alpha() - 2);
        let frac = (pos - lo as f64).clamp(0.0, 1.0);
        (1.0 - frac) * self.value(level, lo, q) + frac * self.value(level, lo + 1, q)
    }

    /// Levels where `v(t_n, alpha, 0) < v(t_{n+1}, alpha, 0)` somewhere, i.e. where more
    /// remaining time is worth less at zero inventory. Reported, not enforced.
    pub fn horizon_monotonicity_violations(&self, tol: f64) -> Vec<usize> {
        let g = self.grid();
        let j = g.q_index(0).unwrap();
        (0..self.policies.len())
            .filter(|&n| {
                (0..g.n_alpha()).any(|i| {
                    let node = g.flatten(i, j);
                    self.surfaces[n].values[node] < self.surfaces[n + 1].values[node] - tol
                })
            })
            .collect()
    }
}

impl ControlLaw for Solution {
    fn control(&self, level: usize, alpha_index: usize, q_index: usize) -> NodeControl {
        let level = level.min(self.policies.len() - 1);
        self.policies[level].controls[self.grid().flatten(alpha_index, q_index)]
    }
}

fn terminal_surface(scheme: &Scheme) -> Vec<f64> {
    let g = scheme.grid();
    (0..g.len())
        .map(|node| {
            let (i, j) = g.unflatten(node);
            terminal_value(scheme.params(), g.alphas()[i], g.q_of(j))
        })
        .collect()
}

fn check_envelope(p: &ModelParams, level: usize, time: f64, values: &[f64]) -> Result<()> {
    let (lower, upper) = stability_bounds(p, time)?;
    for (node, &value) in values.iter().enumerate() {
        if !value.is_finite() || value < lower - ENVELOPE_SLACK || value > upper + ENVELOPE_SLACK {
            return Err(Error::StabilityViolation {
                level,
                node,
                value,
                lower,
                upper,
            });
        }
    }
    Ok(())
}

/// Implicit backward stepping from `v^N = g` down to `v^0`, warm-starting each
/// level's policy iteration from the level above.
pub fn solve_backward(scheme: Scheme, cfg: &PiterConfig) -> Result<Solution> {
    let start = Instant::now();
    let n_levels = scheme.grid().n_time_steps();
    let times = scheme.grid().times().to_vec();
    let terminal = terminal_surface(&scheme);
    let mut surfaces = vec![ValueSurface {
        level: n_levels,
        time: times[n_levels],
        values: terminal,
    }];
    let mut policies = Vec::with_capacity(n_levels);
    let mut stats = Vec::with_capacity(n_levels);
    let mut traces = Vec::with_capacity(n_levels);
    for level in (0..n_levels).rev() {
        let v_next = &surfaces.last().unwrap().values;
        let outcome = iterate(&scheme, v_next, v_next, cfg).map_err(|e| e.at_level(level))?;
        check_envelope(scheme.params(), level, times[level], &outcome.value)?;
        stats.push(LevelStats {
            level,
            iterations: outcome.trace.iterations(),
            stop: Some(outcome.trace.stop),
            interventions: outcome.policy.intervention_count(),
        });
        log::debug!(
            "level {level}: {} iterations, {} interventions",
            outcome.trace.iterations(),
            outcome.policy.intervention_count()
        );
        traces.push(outcome.trace);
        policies.push(outcome.policy);
        surfaces.push(ValueSurface {
            level,
            time: times[level],
            values: outcome.value,
        });
    }
    surfaces.reverse();
    policies.reverse();
    stats.reverse();
    traces.reverse();
    Ok(Solution {
        scheme,
        surfaces,
        policies,
        stats,
        traces,
        elapsed: start.elapsed(),
    })
}

/// Convenience wrapper building the grid and scheme first.
pub fn solve(p: &ModelParams, spec: GridSpec, mode: ExtrapolationMode, cfg: &PiterConfig) -> Result<Solution> {
    let grid = build_grid(p, spec)?;
    solve_backward(Scheme::new(p.clone(), grid, mode), cfg)
}

/// `dt (k A / d_alpha + rho^2 / d_alpha^2 + lambda_a + lambda_b)`; the explicit
/// update is monotone only while this stays below one.
pub fn explicit_cfl_factor(p: &ModelParams, g: &Grid) -> f64 {
    let da = g.dalpha();
    g.dt() * (p.mean_reversion * p.alpha_cap / da + p.signal_vol * p.signal_vol / (da * da) + p.mo_buy_rate + p.mo_sell_rate)
}

/// Forward-Euler stepping of the continuation part with the intervention
/// constraint applied afterwards as a projection. Stops with
/// [`Error::ExplicitInstability`] as soon as a level leaves the stability envelope.
pub fn solve_explicit_baseline(p: &ModelParams, spec: GridSpec, mode: ExtrapolationMode) -> Result<Solution> {
    let start = Instant::now();
    let grid = build_grid(p, spec)?;
    let scheme = Scheme::new(p.clone(), grid, mode);
    let g = scheme.grid().clone();
    let n_levels = g.n_time_steps();
    let dt = g.dt();
    let upsilon = p.liquidity_cost();
    let mut surfaces = vec![ValueSurface {
        level: n_levels,
        time: g.times()[n_levels],
        values: terminal_surface(&scheme),
    }];
    let mut policies = Vec::with_capacity(n_levels);
    let mut stats = Vec::with_capacity(n_levels);
    for level in (0..n_levels).rev() {
        let v_next = &surfaces.last().unwrap().values;
        let mut controls = Vec::with_capacity(g.len());
        let mut v: Vec<f64> = (0..g.len())
            .map(|node| {
                let e = scheme.evaluate_node(node, v_next, v_next);
                controls.push(e.control(false));
                v_next[node] + dt * e.continuation
            })
            .collect();
        for _ in 0..=2 * g.inventory_cap() {
            let mut changed = false;
            for node in 0..g.len() {
                for z in [Impulse::Buy, Impulse::Sell] {
                    if let Some(t) = impulse_target(&g, node, z) {
                        let candidate = v[t] - upsilon;
                        if candidate > v[node] {
                            v[node] = candidate;
                            controls[node].intervene = true;
                            controls[node].impulse = z;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if let Some((node, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::ExplicitInstability { level, node, value });
        }
        if let Err(Error::StabilityViolation { node, value, .. }) = check_envelope(p, level, g.times()[level], &v) {
            return Err(Error::ExplicitInstability { level, node, value });
        }
        let policy = Policy { controls };
        stats.push(LevelStats {
            level,
            iterations: 1,
            stop: None,
            interventions: policy.intervention_count(),
        });
        policies.push(policy);
        surfaces.push(ValueSurface {
            level,
            time: g.times()[level],
            values: v,
        });
    }
    surfaces.reverse();
    policies.reverse();
    stats.reverse();
    Ok(Solution {
        scheme,
        surfaces,
        policies,
        stats,
        traces: Vec::new(),
        elapsed: start.elapsed(),
    })
}

/// Max-norm gap between two solutions on the same lattice at level 0.
pub fn max_difference_at_start(a: &Solution, b: &Solution) -> Result<f64> {
    let (va, vb) = (&a.surface(0).values, &b.surface(0).values);
    if va.len() != vb.len() {
        return Err(Error::DimensionMismatch {
            expected: va.len(),
            got: vb.len(),
        });
    }
    Ok(va.iter().zip(vb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub alpha: f64,
    pub q: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRow {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Max probe gap to the previous (coarser) row.
    pub difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTable {
    pub probes: Vec<ProbePoint>,
    pub rows: Vec<RefinementRow>,
}

impl RefinementTable {
    pub fn differences(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.difference).collect()
    }

    /// Successive differences strictly decrease.
    pub fn is_contracting(&self) -> bool {
        self.differences().windows(2).all(|w| w[1] < w[0])
    }
}

/// Probe points `alpha in {-A/2, 0, A/2}`, `q in {-2, 0, 2}` (inventory clipped to the cap).
pub fn default_probes(p: &ModelParams) -> Vec<ProbePoint> {
    let qs = {
        let q = p.inventory_cap.min(2);
        [-q, 0, q]
    };
    let mut probes = Vec::new();
    for &q in &qs {
        for alpha in [-p.alpha_cap / 2.0, 0.0, p.alpha_cap / 2.0] {
            probes.push(ProbePoint { alpha, q });
        }
    }
    probes
}

/// Solves on `base` and `rounds` successive halvings of both `dt` and `d_alpha`,
/// sampling the level-0 surface at fixed probe points.
pub fn refinement_study(
    p: &ModelParams,
    base: GridSpec,
    rounds: usize,
    mode: ExtrapolationMode,
    cfg: &PiterConfig,
) -> Result<RefinementTable> {
    let probes = default_probes(p);
    let mut rows: Vec<RefinementRow> = Vec::with_capacity(rounds + 1);
    let mut spec = base;
    for round in 0..=rounds {
        if round > 0 {
            spec = spec.refined();
        }
        let sol = solve(p, spec, mode, cfg)?;
        let g = sol.grid();
        let mut values = Vec::with_capacity(probes.len());
        for probe in &probes {
            let pos = probe.alpha / g.dalpha();
            if (pos - pos.round()).abs() > 1e-9 {
                return Err(Error::invalid(
                    "alpha_points",
                    format!("probe alpha {} is not a lattice node", probe.alpha),
                ));
            }
            let i = (pos.round() as isize + g.alpha_center() as isize) as usize;
            values.push(sol.value(0, i, probe.q));
        }
        let difference = rows.last().map(|prev| {
            prev.values
                .iter()
                .zip(&values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
        log::info!("refinement round {round}: {spec:?}, difference {difference:?}");
        rows.push(RefinementRow {
            spec,
            values,
            difference,
        });
    }
    Ok(RefinementTable { probes, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn policy_count_and_ordering() {
        let p = ModelParams::new(ModelConfig {
            alpha_cap: 30.0,
            inventory_cap: 2,
            horizon: 1.0,
            ..ModelConfig::default()
        })
        .unwrap();
        let sol = solve(&p, GridSpec::new(8, 11), ExtrapolationMode::Clamp, &PiterConfig::default()).unwrap();
        assert_eq!(sol.policies().len(), 8);
        assert_eq!(sol.surfaces().len(), 9);
        for (n, s) in sol.surfaces().iter().enumerate() {
            assert_eq!(s.level, n);
        }
        assert_eq!(sol.surface(8).values[0], terminal_value(&p, -30.0, -2));
    }

    #[test]
    fn cfl_factor_reference() {
        let p = ModelParams::reference();
        let g = build_grid(&p, GridSpec::default()).unwrap();
        let expected = 0.05 * (200.0 * 300.0 / 6.0 + 1.0 / 36.0 + 2.0);
        assert!((explicit_cfl_factor(&p, &g) - expected).abs() < 1e-9);
        assert!((expected - 500.1).abs() < 0.01);
    }

    #[test]
    fn interpolated_value_hits_nodes() {
        let p = ModelParams::new(ModelConfig {
            alpha_cap: 30.0,
            inventory_cap: 1,
            horizon: 1.0,
            ..ModelConfig::default()
        })
        .unwrap();
        let sol = solve(&p, GridSpec::new(4, 11), ExtrapolationMode::Clamp, &PiterConfig::default()).unwrap();
        for i in 0..11 {
            let a = sol.grid().alphas()[i];
            assert!((sol.value_interpolated(0, a, 1) - sol.value(0, i, 1)).abs() < 1e-14);
        }
        let mid = 0.5 * (sol.value(0, 5, 0) + sol.value(0, 6, 0));
        assert!((sol.value_interpolated(0, 3.0, 0) - mid).abs() < 1e-14);
    }
}
