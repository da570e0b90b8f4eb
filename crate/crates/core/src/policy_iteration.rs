//! Howard policy iteration for one time level, plus runtime checks of the
//! matrix conditions that make it converge monotonically.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::ExtrapolationMode;
use crate::linsolve::{self, SolveOptions};
use crate::scheme::{Impulse, Policy, Scheme, SparseSystem};

/// Below this magnitude the relative stopping metric falls back to the absolute difference.
pub const RELATIVE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Verification {
    Off,
    /// Check matrix conditions of every assembled system and monotonicity of iterates.
    #[default]
    PerStep,
    /// Per-step checks plus a complementarity check of each converged level.
    Exhaustive,
}

impl FromStr for Verification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "per-step" => Ok(Self::PerStep),
            "exhaustive" => Ok(Self::Exhaustive),
            other => Err(Error::Config(format!(
                "unknown verification level `{other}` (expected off, per-step or exhaustive)"
            ))),
        }
    }
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::PerStep => "per-step",
            Self::Exhaustive => "exhaustive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiterConfig {
    /// Relative stopping tolerance `r`.
    pub tolerance: f64,
    pub max_iter: usize,
    pub verification: Verification,
    pub solve: SolveOptions,
}

impl Default for PiterConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 50,
            verification: Verification::PerStep,
            solve: SolveOptions::default(),
        }
    }
}

impl PiterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::invalid("piter_tolerance", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("piter_max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Relative change fell below the tolerance.
    Tolerance,
    /// Improvement returned the policy already solved for.
    PolicyRepeat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub policy_digest: u64,
    pub interventions: usize,
    /// `max_i |(v^{k+1}_i - v^k_i) / v^{k+1}_i|`, guarded near zero.
    pub metric: f64,
    /// `min_i (v^{k+1}_i - v^k_i)`.
    pub min_increment: f64,
    pub solve_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiterTrace {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl PiterTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Tab-separated per-iteration metrics, one line per iteration.
    pub fn write_tsv(&self, level: usize, out: &mut impl Write) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(
                out,
                "{level}\t{}\t{:016x}\t{}\t{:.6e}\t{:.6e}\t{:.3e}",
                r.iteration, r.policy_digest, r.interventions, r.metric, r.min_increment, r.solve_residual
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiterOutcome {
    pub value: Vec<f64>,
    /// The policy whose system `value` solves.
    pub policy: Policy,
    pub trace: PiterTrace,
}

/// Node-wise argmax of `-A(P) v + b(P)`. Ties keep the continuation.
///
/// Two adjacent interventions pointing at each other cannot both be optimal
/// once `v` solves some admissible system (their values sum to `-2 Upsilon`),
/// but an arbitrary `v` can produce the pair; the one with the smaller impulse
/// value falls back to its continuation choice.
pub fn improve_policy(scheme: &Scheme, v: &[f64], v_next: &[f64]) -> Policy {
    let g = scheme.grid();
    let dt = g.dt();
    let evals: Vec<_> = (0..g.len()).map(|n| scheme.evaluate_node(n, v, v_next)).collect();
    let mut controls: Vec<_> = evals
        .iter()
        .map(|e| e.control(e.impulse_value > dt * e.continuation))
        .collect();
    let n_alpha = g.n_alpha();
    for node in 0..g.len() {
        let c = controls[node];
        if !(c.intervene && c.impulse == Impulse::Buy) {
            continue;
        }
        let above = node + n_alpha;
        if above < g.len() && controls[above].intervene && controls[above].impulse == Impulse::Sell {
            let drop = if evals[node].impulse_value < evals[above].impulse_value {
                node
            } else {
                above
            };
            controls[drop].intervene = false;
        }
    }
    Policy { controls }
}

fn stopping_metric(new: &[f64], old: &[f64]) -> f64 {
    new.iter()
        .zip(old)
        .map(|(&a, &b)| {
            if a.abs() < RELATIVE_GUARD {
                (a - b).abs()
            } else {
                ((a - b) / a).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn check_system(scheme: &Scheme, system: &SparseSystem) -> Result<()> {
    let report = verify_theorem_conditions(system);
    if report.passed() {
        return Ok(());
    }
    match scheme.mode() {
        ExtrapolationMode::Clamp => Err(Error::ConditionViolation(report.summary())),
        ExtrapolationMode::Linear => {
            log::debug!("matrix conditions not met under linear extrapolation: {}", report.summary());
            Ok(())
        }
    }
}

/// Policy iteration from initial guess `v0` for the level whose successor is `v_next`.
pub fn iterate(scheme: &Scheme, v0: &[f64], v_next: &[f64], cfg: &PiterConfig) -> Result<PiterOutcome> {
    cfg.validate()?;
    let m = scheme.grid().len();
    for len in [v0.len(), v_next.len()] {
        if len != m {
            return Err(Error::DimensionMismatch { expected: m, got: len });
        }
    }
    let verify = cfg.verification != Verification::Off;
    let mut v = v0.to_vec();
    let mut current: Option<Policy> = None;
    let mut records = Vec::new();
    let mut metric = f64::INFINITY;
    for k in 0..cfg.max_iter {
        let policy = improve_policy(scheme, &v, v_next);
        if let Some(prev) = &current {
            if *prev == policy {
                return finish(scheme, v, policy, v_next, cfg, records, StopReason::PolicyRepeat);
            }
        }
        let system = scheme.assemble_system(&policy, v_next)?;
        if verify {
            check_system(scheme, &system)?;
        }
        let report = linsolve::solve(&system.matrix, &system.rhs, &cfg.solve)?;
        let next = report.solution;
        metric = stopping_metric(&next, &v);
        let (min_increment, worst) = next
            .iter()
            .zip(&v)
            .map(|(a, b)| a - b)
            .enumerate()
            .fold((f64::INFINITY, 0), |acc, (i, d)| if d < acc.0 { (d, i) } else { acc });
        // the initial guess is arbitrary; monotonicity applies from the first solve on
        if verify && k > 0 {
            let slack = 10.0 * cfg.solve.tol * (1.0 + inf_norm(&next));
            if min_increment < -slack {
                // linear extrapolation gives up the M-matrix property, and with it the guarantee
                if scheme.mode() == ExtrapolationMode::Linear {
                    log::debug!("iterate decreased by {:.3e} at node {worst}", -min_increment);
                } else {
                    return Err(Error::NonMonotoneIterates {
                        node: worst,
                        before: v[worst],
                        after: next[worst],
                    });
                }
            }
        }
        records.push(IterationRecord {
            iteration: k,
            policy_digest: policy.digest(),
            interventions: policy.intervention_count(),
            metric,
            min_increment,
            solve_residual: report.residual,
        });
        v = next;
        current = Some(policy);
        if metric < cfg.tolerance {
            let policy = current.take().unwrap();
            return finish(scheme, v, policy, v_next, cfg, records, StopReason::Tolerance);
        }
    }
    Err(Error::PolicyIterationExhausted {
        max_iter: cfg.max_iter,
        metric,
    })
}

fn finish(
    scheme: &Scheme,
    value: Vec<f64>,
    policy: Policy,
    v_next: &[f64],
    cfg: &PiterConfig,
    records: Vec<IterationRecord>,
    stop: StopReason,
) -> Result<PiterOutcome> {
    if cfg.verification == Verification::Exhaustive {
        let bound = complementarity_bound(scheme, &value, cfg);
        let (residual, _) = scheme.residual(&value, v_next);
        if let Some((node, r)) = residual
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.abs()))
            .find(|&(_, r)| r > bound)
        {
            return Err(Error::ConditionViolation(format!(
                "discrete residual {r:.3e} at node {node} exceeds {bound:.3e}"
            )));
        }
    }
    Ok(PiterOutcome {
        value,
        policy,
        trace: PiterTrace { records, stop },
    })
}

/// Admissible size of the discrete residual at a converged level.
pub fn complementarity_bound(scheme: &Scheme, value: &[f64], cfg: &PiterConfig) -> f64 {
    let scale = 1.0 + inf_norm(value);
    10.0 * (cfg.solve.tol + cfg.tolerance) * scale / scheme.grid().dt()
}

/// Findings of the matrix-condition check on one assembled system.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionReport {
    /// Continuation rows with a positive off-diagonal or non-positive diagonal.
    pub z_matrix: Vec<usize>,
    /// Continuation rows that are not strictly diagonally dominant.
    pub dominance: Vec<usize>,
    /// Impulse rows that are not `+1` on the diagonal and a single `-1`.
    pub impulse_rows: Vec<usize>,
    /// Impulse rows from which the impulse chain never reaches a continuation row.
    pub path: Vec<usize>,
    /// Smallest `a_ii - sum_j |a_ij|` over continuation rows.
    pub min_margin: f64,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.z_matrix.is_empty() && self.dominance.is_empty() && self.impulse_rows.is_empty() && self.path.is_empty()
    }

    pub fn summary(&self) -> String {
        let first = |v: &[usize]| v.first().map_or("-".to_string(), |n| n.to_string());
        format!(
            "z-matrix rows {} (first {}), dominance rows {} (first {}), impulse rows {} (first {}), path failures {} (first {}), min margin {:.3e}",
            self.z_matrix.len(),
            first(&self.z_matrix),
            self.dominance.len(),
            first(&self.dominance),
            self.impulse_rows.len(),
            first(&self.impulse_rows),
            self.path.len(),
            first(&self.path),
            self.min_margin
        )
    }
}

/// Checks the sufficient conditions for convergent policy iteration:
/// continuation rows form a strictly diagonally dominant Z-matrix, impulse
/// rows are weakly dominant with zero row sum, and every impulse row leads
/// through the impulse graph to a continuation row.
pub fn verify_theorem_conditions(system: &SparseSystem) -> ConditionReport {
    let a = &system.matrix;
    let n = a.n();
    let mut report = ConditionReport {
        min_margin: f64::INFINITY,
        ..Default::default()
    };
    let mut successor = vec![None; n];
    for i in 0..n {
        let mut diag = 0.0;
        let mut off_abs = 0.0;
        let mut positive_off = false;
        let mut offs = Vec::new();
        for (j, v) in a.row(i) {
            if j == i {
                diag = v;
            } else {
                off_abs += v.abs();
                positive_off |= v > 0.0;
                offs.push((j, v));
            }
        }
        if system.impulse_rows[i] {
            if diag != 1.0 || offs.len() != 1 || offs[0].1 != -1.0 {
                report.impulse_rows.push(i);
            } else {
                successor[i] = Some(offs[0].0);
            }
        } else {
            if positive_off || diag <= 0.0 {
                report.z_matrix.push(i);
            }
            let margin = diag - off_abs;
            report.min_margin = report.min_margin.min(margin);
            if margin <= 0.0 {
                report.dominance.push(i);
            }
        }
    }
    // 0 = unknown, 1 = reaches a continuation row, 2 = does not
    let mut state = vec![0u8; n];
    let mut stamp = vec![usize::MAX; n];
    for start in 0..n {
        if !system.impulse_rows[start] || state[start] != 0 {
            continue;
        }
        let mut chain = vec![start];
        stamp[start] = start;
        let mut node = start;
        let outcome = loop {
            match successor[node] {
                None => break 2,
                Some(next) if !system.impulse_rows[next] || state[next] == 1 => break 1,
                Some(next) if state[next] == 2 || stamp[next] == start => break 2,
                Some(next) => {
                    stamp[next] = start;
                    chain.push(next);
                    node = next;
                }
            }
        };
        for &c in &chain {
            state[c] = outcome;
        }
    }
    report.path = (0..n).filter(|&i| state[i] == 2).collect();
    report
}
