//! Implicit discretization of the quasi-variational inequality.
//!
//! For one time step the unknown surface `v` satisfies, node by node,
//!
//! ```text
//! max( max_w (v_next - v)/dt + (L_w v) + f_w ,  max_z (B_z v) - Upsilon ) = 0
//! ```
//!
//! where `L_w` is the upwind drift / central diffusion / jump generator under
//! limit-order choice `w = (ask, bid)` and `B_z` moves one unit of inventory.
//! Written as `sup_P { -A(P) v + b(P) } = 0`, the policy-indexed rows are
//! `I - dt L_w` with right side `v_next + dt f_w` (continuation) and
//! `I - (I + B_z)` with right side `-Upsilon` (impulse).

use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::grid::{ExtrapolationMode, Grid, Stencils};
use crate::linsolve::{CsrBuilder, CsrMatrix};
use crate::model::{running_reward, ModelParams};

/// Direction of an own market order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Impulse {
    /// Market buy, `z = +1`, inventory goes up.
    #[default]
    Buy,
    /// Market sell, `z = -1`, inventory goes down.
    Sell,
}

impl Impulse {
    pub fn sign(self) -> i32 {
        match self {
            Impulse::Buy => 1,
            Impulse::Sell => -1,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Impulse::Buy => Impulse::Sell,
            Impulse::Sell => Impulse::Buy,
        }
    }
}

/// Control at one node: resting ask/bid, impulse direction and whether to intervene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NodeControl {
    pub ask: bool,
    pub bid: bool,
    pub impulse: Impulse,
    pub intervene: bool,
}

impl NodeControl {
    pub const IDLE: NodeControl = NodeControl {
        ask: false,
        bid: false,
        impulse: Impulse::Buy,
        intervene: false,
    };

    pub fn quote(ask: bool, bid: bool) -> Self {
        Self {
            ask,
            bid,
            ..Self::IDLE
        }
    }

    pub fn market(impulse: Impulse) -> Self {
        Self {
            impulse,
            intervene: true,
            ..Self::IDLE
        }
    }
}

/// One control per flattened node of a time level.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    pub controls: Vec<NodeControl>,
}

impl Policy {
    /// No quotes and no interventions anywhere.
    pub fn idle(len: usize) -> Self {
        Self {
            controls: vec![NodeControl::IDLE; len],
        }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Stable 64-bit fingerprint for traces.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::default();
        self.controls.hash(&mut h);
        h.finish()
    }

    pub fn intervention_count(&self) -> usize {
        self.controls.iter().filter(|c| c.intervene).count()
    }

    /// Checks impulse admissibility: no market buy at `+Qbar`, no market sell at
    /// `-Qbar`, and no pair of adjacent interventions pointing at each other.
    pub fn validate(&self, g: &Grid) -> Result<()> {
        if self.len() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: g.len(),
                got: self.len(),
            });
        }
        for (node, c) in self.controls.iter().enumerate() {
            if !c.intervene {
                continue;
            }
            let Some(target) = impulse_target(g, node, c.impulse) else {
                return Err(Error::InadmissiblePolicy {
                    node,
                    reason: "market order would breach the inventory cap".into(),
                });
            };
            let other = self.controls[target];
            if other.intervene && other.impulse == c.impulse.reversed() {
                return Err(Error::InadmissiblePolicy {
                    node,
                    reason: format!("opposing market orders with node {target}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Fnv64(u64);

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        if self.0 == 0 {
            self.0 = 0xcbf2_9ce4_8422_2325;
        }
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Node reached by an impulse, or `None` if it would leave `[-Qbar, Qbar]`.
pub fn impulse_target(g: &Grid, node: usize, z: Impulse) -> Option<usize> {
    let (i, j) = g.unflatten(node);
    let q = g.q_of(j) + z.sign();
    g.q_index(q).map(|jj| g.flatten(i, jj))
}

/// Every admissible control at `node` (caps applied), for enumeration.
pub fn admissible_controls(g: &Grid, node: usize) -> Vec<NodeControl> {
    let (_, j) = g.unflatten(node);
    let q = g.q_of(j);
    let cap = g.inventory_cap();
    let asks: &[bool] = if q > -cap { &[false, true] } else { &[false] };
    let bids: &[bool] = if q < cap { &[false, true] } else { &[false] };
    let mut out = Vec::new();
    for &ask in asks {
        for &bid in bids {
            out.push(NodeControl::quote(ask, bid));
        }
    }
    for z in [Impulse::Buy, Impulse::Sell] {
        if impulse_target(g, node, z).is_some() {
            out.push(NodeControl::market(z));
        }
    }
    out
}

/// Policy-indexed linear system `A(P) v = b(P)` for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub impulse_rows: Vec<bool>,
}

/// Best continuation and impulse choices at a single node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeEvaluation {
    /// `(v_next - v)/dt + L_w v + f_w` at the best `w`.
    pub continuation: f64,
    pub ask: bool,
    pub bid: bool,
    /// `B_z v - Upsilon` at the best admissible `z`.
    pub impulse_value: f64,
    pub impulse: Impulse,
}

impl NodeEvaluation {
    pub fn control(&self, intervene: bool) -> NodeControl {
        NodeControl {
            ask: self.ask,
            bid: self.bid,
            impulse: self.impulse,
            intervene,
        }
    }
}

/// Discretization context for one `(params, grid, stencils)` triple.
#[derive(Debug, Clone)]
pub struct Scheme {
    params: ModelParams,
    grid: Grid,
    stencils: Stencils,
}

impl Scheme {
    pub fn new(params: ModelParams, grid: Grid, mode: ExtrapolationMode) -> Self {
        let stencils = Stencils::new(&grid, &params, mode);
        Self {
            params,
            grid,
            stencils,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn stencils(&self) -> &Stencils {
        &self.stencils
    }

    pub fn mode(&self) -> ExtrapolationMode {
        self.stencils.mode
    }

    /// Generator weights toward `alpha_{i+1}` and `alpha_{i-1}`: upwind drift
    /// plus central diffusion, the latter switched off at `alpha = +/-A`.
    fn neighbour_rates(&self, i: usize) -> (f64, f64) {
        let p = &self.params;
        let g = &self.grid;
        let alpha = g.alphas()[i];
        let da = g.dalpha();
        let diffusion = if i == 0 || i + 1 == g.n_alpha() {
            0.0
        } else {
            0.5 * p.signal_vol * p.signal_vol / (da * da)
        };
        let up = p.mean_reversion * (-alpha).max(0.0) / da + diffusion;
        let down = p.mean_reversion * alpha.max(0.0) / da + diffusion;
        (up, down)
    }

    fn effective_quotes(&self, q: i32, ask: bool, bid: bool) -> (bool, bool) {
        let cap = self.grid.inventory_cap();
        (ask && q > -cap, bid && q < cap)
    }

    /// Row of `I - dt L_w` at `node` and the right-side term `dt f_w`.
    /// An ask at `-Qbar` or a bid at `+Qbar` is dropped.
    pub fn continuation_row(&self, node: usize, ask: bool, bid: bool, dt: f64) -> (Vec<(usize, f64)>, f64) {
        let p = &self.params;
        let g = &self.grid;
        let (i, j) = g.unflatten(node);
        let q = g.q_of(j);
        let (ask, bid) = self.effective_quotes(q, ask, bid);
        let (up, down) = self.neighbour_rates(i);
        let mut row = Vec::with_capacity(8);
        row.push((node, 1.0 + dt * (up + down + p.mo_buy_rate + p.mo_sell_rate)));
        if up > 0.0 {
            row.push((g.flatten(i + 1, j), -dt * up));
        }
        if down > 0.0 {
            row.push((g.flatten(i - 1, j), -dt * down));
        }
        let ask_j = if ask { j - 1 } else { j };
        for &(k, w) in &self.stencils.up[i].entries {
            row.push((g.flatten(k, ask_j), -dt * p.mo_buy_rate * w));
        }
        let bid_j = if bid { j + 1 } else { j };
        for &(k, w) in &self.stencils.down[i].entries {
            row.push((g.flatten(k, bid_j), -dt * p.mo_sell_rate * w));
        }
        let reward = running_reward(p, g.alphas()[i], q, ask, bid);
        (row, dt * reward)
    }

    /// Row of `I - B(z)` at `node` (`+1` on the diagonal, `-1` at the target) and `-Upsilon`.
    pub fn impulse_row(&self, node: usize, z: Impulse) -> Result<(Vec<(usize, f64)>, f64)> {
        let target = impulse_target(&self.grid, node, z).ok_or_else(|| Error::InadmissibleImpulse {
            node,
            reason: format!("market {z:?} would breach the inventory cap"),
        })?;
        Ok((vec![(node, 1.0), (target, -1.0)], -self.params.liquidity_cost()))
    }

    pub fn assemble_system(&self, policy: &Policy, v_next: &[f64]) -> Result<SparseSystem> {
        let m = self.grid.len();
        for len in [policy.len(), v_next.len()] {
            if len != m {
                return Err(Error::DimensionMismatch { expected: m, got: len });
            }
        }
        let dt = self.grid.dt();
        let mut builder = CsrBuilder::with_capacity(m, 7 * m);
        let mut rhs = Vec::with_capacity(m);
        let mut impulse_rows = Vec::with_capacity(m);
        for (node, c) in policy.controls.iter().enumerate() {
            if c.intervene {
                let (row, k) = self.impulse_row(node, c.impulse)?;
                builder.push_row(row);
                rhs.push(k);
            } else {
                let (row, reward) = self.continuation_row(node, c.ask, c.bid, dt);
                builder.push_row(row);
                rhs.push(v_next[node] + reward);
            }
            impulse_rows.push(c.intervene);
        }
        Ok(SparseSystem {
            matrix: builder.finish(),
            rhs,
            impulse_rows,
        })
    }

    /// Best continuation and impulse choices at `node` for surface `v`.
    /// Ties prefer not quoting and a market buy.
    pub fn evaluate_node(&self, node: usize, v: &[f64], v_next: &[f64]) -> NodeEvaluation {
        let p = &self.params;
        let g = &self.grid;
        let (i, j) = g.unflatten(node);
        let q = g.q_of(j);
        let cap = g.inventory_cap();
        let n_alpha = g.n_alpha();
        let at = |k: usize, jj: usize| v[jj * n_alpha + k];
        let centre = v[node];

        let (up, down) = self.neighbour_rates(i);
        let mut generator = -(up + down + p.mo_buy_rate + p.mo_sell_rate) * centre;
        if up > 0.0 {
            generator += up * at(i + 1, j);
        }
        if down > 0.0 {
            generator += down * at(i - 1, j);
        }

        let shifted = |entries: &[(usize, f64)], jj: usize| -> f64 { entries.iter().map(|&(k, w)| w * at(k, jj)).sum() };
        let up_st = &self.stencils.up[i].entries;
        let down_st = &self.stencils.down[i].entries;

        let keep_ask = shifted(up_st, j);
        let mut ask = false;
        let mut ask_term = keep_ask;
        if q > -cap {
            let filled = shifted(up_st, j - 1) + p.half_spread;
            if filled > keep_ask {
                ask = true;
                ask_term = filled;
            }
        }
        let keep_bid = shifted(down_st, j);
        let mut bid = false;
        let mut bid_term = keep_bid;
        if q < cap {
            let filled = shifted(down_st, j + 1) + p.half_spread;
            if filled > keep_bid {
                bid = true;
                bid_term = filled;
            }
        }
        // spread income is folded into the jump terms above
        generator += p.mo_buy_rate * ask_term + p.mo_sell_rate * bid_term;
        let base_reward = running_reward(p, g.alphas()[i], q, false, false);
        let continuation = (v_next[node] - centre) / g.dt() + generator + base_reward;

        let mut impulse = Impulse::Buy;
        let mut impulse_value = f64::NEG_INFINITY;
        for z in [Impulse::Buy, Impulse::Sell] {
            if let Some(t) = impulse_target(g, node, z) {
                let val = v[t] - centre - p.liquidity_cost();
                if val > impulse_value {
                    impulse_value = val;
                    impulse = z;
                }
            }
        }
        NodeEvaluation {
            continuation,
            ask,
            bid,
            impulse_value,
            impulse,
        }
    }

    /// Discrete residual `S` at every node and the node-wise maximising policy.
    /// Continuation wins exact ties.
    pub fn residual(&self, v_n: &[f64], v_next: &[f64]) -> (Vec<f64>, Policy) {
        let mut values = Vec::with_capacity(v_n.len());
        let mut controls = Vec::with_capacity(v_n.len());
        for node in 0..self.grid.len() {
            let e = self.evaluate_node(node, v_n, v_next);
            let intervene = e.impulse_value > e.continuation;
            values.push(if intervene { e.impulse_value } else { e.continuation });
            controls.push(e.control(intervene));
        }
        (values, Policy { controls })
    }

    /// `(L_w v)` at `node` for a fixed quote choice.
    pub fn apply_generator(&self, node: usize, v: &[f64], ask: bool, bid: bool) -> f64 {
        let (row, _) = self.continuation_row(node, ask, bid, 1.0);
        // row = I - L, so L v = v_node - row . v
        v[node] - row.iter().map(|&(k, w)| w * v[k]).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_scheme(mode: ExtrapolationMode) -> Scheme {
        let p = ModelParams::reference();
        let g = build_grid(&p, GridSpec::default()).unwrap();
        Scheme::new(p, g, mode)
    }

    pub(crate) fn toy_scheme(mode: ExtrapolationMode) -> Scheme {
        let p = ModelParams::new(ModelConfig {
            horizon: 0.5,
            alpha_cap: 1.0,
            inventory_cap: 1,
            jump_up: 0.6,
            jump_down: 1.3,
            mean_reversion: 2.0,
            signal_vol: 0.8,
            tick: 0.05,
            half_spread: 0.02,
            taker_fee: 0.01,
            mo_buy_rate: 1.5,
            mo_sell_rate: 0.7,
            running_penalty: 0.01,
            terminal_penalty: 0.02,
            ..ModelConfig::default()
        })
        .unwrap();
        let g = build_grid(&p, GridSpec::new(1, 3)).unwrap();
        Scheme::new(p, g, mode)
    }

    fn for_each_policy(g: &Grid, mut f: impl FnMut(&Policy)) {
        let options: Vec<Vec<NodeControl>> = (0..g.len()).map(|n| admissible_controls(g, n)).collect();
        let mut idx = vec![0usize; g.len()];
        loop {
            let policy = Policy {
                controls: idx.iter().enumerate().map(|(n, &k)| options[n][k]).collect(),
            };
            if policy.validate(g).is_ok() {
                f(&policy);
            }
            let mut n = 0;
            loop {
                if n == idx.len() {
                    return;
                }
                idx[n] += 1;
                if idx[n] < options[n].len() {
                    break;
                }
                idx[n] = 0;
                n += 1;
            }
        }
    }

    #[test]
    fn diagonal_at_zero_alpha() {
        let s = reference_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let node = g.flatten(50, 4);
        let (row, _) = s.continuation_row(node, true, true, g.dt());
        let diag: f64 = row.iter().filter(|e| e.0 == node).map(|e| e.1).sum();
        assert!((diag - (1.0 + 0.05 * (1.0 / 36.0 + 2.0))).abs() < 1e-14);
    }

    #[test]
    fn reference_interior_row_has_five_entries() {
        let s = reference_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let policy = Policy::idle(g.len());
        let sys = s.assemble_system(&policy, &vec![0.0; g.len()]).unwrap();
        let node = g.flatten(50, 4);
        assert_eq!(sys.matrix.row_len(node), 5);
        let cols: Vec<usize> = sys.matrix.row(node).map(|e| e.0).collect();
        assert_eq!(cols, vec![g.flatten(40, 4), g.flatten(49, 4), node, g.flatten(51, 4), g.flatten(60, 4)]);
    }

    #[test]
    fn top_boundary_row_couples_down_only() {
        let s = reference_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let top = g.n_alpha() - 1;
        let node = g.flatten(top, 4);
        let (row, _) = s.continuation_row(node, false, false, g.dt());
        let sys = CsrMatrix::from_rows(vec![row]);
        let alpha_cols: Vec<usize> = sys.row(0).map(|(c, _)| g.unflatten(c).0).collect();
        // down neighbour, self (clamped up-jump merges with the diagonal) and the down-jump target
        assert_eq!(alpha_cols, vec![top - 10, top - 1, top]);
    }

    #[test]
    fn constant_surface_is_reproduced() {
        for mode in [ExtrapolationMode::Clamp, ExtrapolationMode::Linear] {
            let s = reference_scheme(mode);
            let g = s.grid();
            let c = vec![2.5; g.len()];
            for node in (0..g.len()).step_by(7) {
                for (ask, bid) in [(false, false), (true, false), (false, true), (true, true)] {
                    assert!(s.apply_generator(node, &c, ask, bid).abs() < 1e-9);
                    let (row, _) = s.continuation_row(node, ask, bid, g.dt());
                    let applied: f64 = row.iter().map(|&(k, w)| w * c[k]).sum();
                    assert!((applied - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_rows() {
        let s = reference_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let node = g.flatten(20, 4);
        let (row, k) = s.impulse_row(node, Impulse::Buy).unwrap();
        assert_eq!(row, vec![(node, 1.0), (g.flatten(20, 5), -1.0)]);
        assert!((k + 0.01).abs() < 1e-15);
        assert_eq!(row.iter().map(|e| e.1).sum::<f64>(), 0.0);
        let top_q = g.flatten(20, 8);
        assert!(matches!(s.impulse_row(top_q, Impulse::Buy), Err(Error::InadmissibleImpulse { .. })));
        assert!(s.impulse_row(g.flatten(20, 0), Impulse::Sell).is_err());
    }

    #[test]
    fn continuation_policy_gives_plain_system() {
        let s = toy_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let v_next: Vec<f64> = (0..g.len()).map(|n| n as f64 * 0.1).collect();
        let policy = Policy {
            controls: (0..g.len()).map(|n| NodeControl::quote(n % 2 == 0, n % 3 == 0)).collect(),
        };
        let sys = s.assemble_system(&policy, &v_next).unwrap();
        for node in 0..g.len() {
            let c = policy.controls[node];
            let (row, reward) = s.continuation_row(node, c.ask, c.bid, g.dt());
            let expect = CsrMatrix::from_rows(vec![row]);
            assert_eq!(sys.matrix.row(node).collect::<Vec<_>>(), expect.row(0).collect::<Vec<_>>());
            assert!((sys.rhs[node] - v_next[node] - reward).abs() < 1e-15);
        }
    }

    #[test]
    fn exhaustive_row_invariants_on_toy_grid() {
        let s = toy_scheme(ExtrapolationMode::Clamp);
        let g = s.grid().clone();
        let v_next = vec![0.0; g.len()];
        let mut count = 0;
        for_each_policy(&g, |policy| {
            count += 1;
            let sys = s.assemble_system(policy, &v_next).unwrap();
            for node in 0..g.len() {
                let diag = sys.matrix.get(node, node);
                let off: Vec<f64> = sys.matrix.row(node).filter(|e| e.0 != node).map(|e| e.1).collect();
                assert!(off.iter().all(|&v| v <= 0.0));
                let margin = diag - off.iter().map(|v| v.abs()).sum::<f64>();
                if sys.impulse_rows[node] {
                    assert_eq!(diag, 1.0);
                    assert_eq!(off, vec![-1.0]);
                    assert_eq!(margin, 0.0);
                    assert!(sys.matrix.row_len(node) <= 2);
                } else {
                    assert!(diag > 0.0);
                    assert!(margin >= 1.0 - 1e-10);
                    assert!(sys.matrix.row_len(node) <= 3 + 2 + 2);
                }
            }
        });
        // 3 alphas x (3 * 6 * 3) controls minus opposing impulse pairs
        assert!(count > 10_000);
    }

    #[test]
    fn residual_vanishes_on_constant_surface_without_rewards() {
        let p = ModelParams::new(ModelConfig {
            half_spread: 0.0,
            running_penalty: 0.0,
            ..ModelConfig::default()
        })
        .unwrap();
        let g = build_grid(&p, GridSpec::new(10, 21)).unwrap();
        let s = Scheme::new(p, g, ExtrapolationMode::Clamp);
        // zero inventory row only: alpha sigma q vanishes there
        let v = vec![1.75; s.grid().len()];
        let (res, policy) = s.residual(&v, &v);
        for i in 0..s.grid().n_alpha() {
            let node = s.grid().flatten(i, s.grid().q_index(0).unwrap());
            assert!(res[node].abs() < 1e-12);
            assert!(!policy.controls[node].intervene);
        }
    }

    #[test]
    fn monotone_in_off_centre_values() {
        let s = reference_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let node = rng.random_range(0..g.len());
            let w: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w_next: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut u: Vec<f64> = w.iter().map(|x| x + rng.random_range(0.0..0.5)).collect();
            let u_next: Vec<f64> = w_next.iter().map(|x| x + rng.random_range(0.0..0.5)).collect();
            u[node] = w[node];
            let su = s.evaluate_node(node, &u, &u_next);
            let sw = s.evaluate_node(node, &w, &w_next);
            let max_u = su.continuation.max(su.impulse_value);
            let max_w = sw.continuation.max(sw.impulse_value);
            assert!(max_u >= max_w - 1e-12);
        }
    }

    #[test]
    fn opposing_impulses_rejected() {
        let s = toy_scheme(ExtrapolationMode::Clamp);
        let g = s.grid();
        let mut policy = Policy::idle(g.len());
        policy.controls[g.flatten(1, 1)] = NodeControl::market(Impulse::Buy);
        policy.controls[g.flatten(1, 2)] = NodeControl::market(Impulse::Sell);
        assert!(matches!(policy.validate(g), Err(Error::InadmissiblePolicy { .. })));
        policy.controls[g.flatten(1, 2)] = NodeControl::IDLE;
        assert!(policy.validate(g).is_ok());
        policy.controls[g.flatten(1, 2)] = NodeControl::market(Impulse::Buy);
        assert!(policy.validate(g).is_err());
    }
}
