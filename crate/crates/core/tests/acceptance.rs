//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! `cargo test -p mmqvi --test acceptance`

use std::time::Instant;

use mmqvi::grid::{build_grid, ExtrapolationMode, GridSpec};
use mmqvi::model::{stability_bounds, terminal_value, ModelConfig, ModelParams};
use mmqvi::montecarlo::{estimate_performance, estimate_with, predicted_value, InitialState, SimulationConfig};
use mmqvi::policy_iteration::{iterate, verify_theorem_conditions, PiterConfig, StopReason};
use mmqvi::scheme::{admissible_controls, Impulse, NodeControl, Policy, Scheme};
use mmqvi::solver::{
    explicit_cfl_factor, max_difference_at_start, refinement_study, solve, solve_explicit_baseline, NullControl,
    Solution,
};
use mmqvi::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn reference() -> ModelParams {
    ModelParams::reference()
}

fn toy() -> Scheme {
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
    Scheme::new(p, g, ExtrapolationMode::Clamp)
}

/// Every admissible policy on a small grid (no opposing market-order pairs).
fn all_policies(g: &mmqvi::Grid) -> Vec<Policy> {
    let choices: Vec<Vec<NodeControl>> = (0..g.len()).map(|n| admissible_controls(g, n)).collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; g.len()];
    loop {
        let p = Policy {
            controls: idx.iter().enumerate().map(|(n, &k)| choices[n][k]).collect(),
        };
        if p.validate(g).is_ok() {
            out.push(p);
        }
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return out;
            }
            idx[pos] += 1;
            if idx[pos] < choices[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Dense Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn random_policy(g: &mmqvi::Grid, rng: &mut ChaCha8Rng) -> Policy {
    let mut controls: Vec<NodeControl> = (0..g.len())
        .map(|n| {
            let c = admissible_controls(g, n);
            c[rng.random_range(0..c.len())]
        })
        .collect();
    // break opposing pairs
    for node in 0..g.len() {
        if controls[node].intervene && controls[node].impulse == Impulse::Buy {
            let above = node + g.n_alpha();
            if controls[above].intervene && controls[above].impulse == Impulse::Sell {
                controls[above].intervene = false;
            }
        }
    }
    Policy { controls }
}

fn c1_envelope(sol: &Solution) -> Outcome {
    let mut worst = f64::INFINITY;
    let mut bad = 0usize;
    for s in sol.surfaces() {
        let (lo, hi) = stability_bounds(sol.params(), s.time).unwrap();
        for &v in &s.values {
            let margin = (v - lo).min(hi - v);
            worst = worst.min(margin);
            if !v.is_finite() || v < lo - 1e-8 || v > hi + 1e-8 {
                bad += 1;
            }
        }
    }
    let nodes = sol.grid().len();
    outcome(
        bad == 0 && sol.surfaces().len() == 201 && nodes == 909,
        format!("{nodes} nodes x {} levels, {bad} outside, min margin {worst:.3e}", sol.policies().len()),
    )
}

fn c2_monotone_convergence(sol: &Solution, cfg: &PiterConfig) -> Outcome {
    let mut max_iter = 0;
    let mut worst_drop = 0.0f64;
    let mut repeats = 0;
    let mut bad = Vec::new();
    for (level, t) in sol.traces.iter().enumerate() {
        max_iter = max_iter.max(t.iterations());
        let scale = 1.0 + sol.surface(level).values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for r in t.records.iter().skip(1) {
            worst_drop = worst_drop.min(r.min_increment);
            if r.min_increment < -10.0 * cfg.solve.tol * scale {
                bad.push(level);
            }
        }
        let last = t.records.last().unwrap();
        match t.stop {
            StopReason::Tolerance if last.metric < cfg.tolerance => {}
            StopReason::PolicyRepeat => repeats += 1,
            _ => bad.push(level),
        }
        if t.iterations() > 50 {
            bad.push(level);
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "max {max_iter} iterations/level, worst decrease {worst_drop:.2e}, {repeats} levels stopped on a repeated policy, failing levels {bad:?}"
        ),
    )
}

fn c3_brute_force() -> Outcome {
    let s = toy();
    let g = s.grid();
    let policies = all_policies(g);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let terminal: Vec<f64> = (0..g.len())
        .map(|n| {
            let (i, j) = g.unflatten(n);
            terminal_value(s.params(), g.alphas()[i], g.q_of(j))
        })
        .collect();
    let mut nexts = vec![terminal];
    for _ in 0..4 {
        nexts.push((0..g.len()).map(|_| rng.random_range(-0.1..0.1)).collect());
    }
    for v_next in &nexts {
        let mut best = vec![f64::NEG_INFINITY; g.len()];
        for p in &policies {
            let sys = s.assemble_system(p, v_next).unwrap();
            let x = dense_solve(sys.matrix.to_dense(), sys.rhs.clone());
            for (b, xi) in best.iter_mut().zip(&x) {
                *b = b.max(*xi);
            }
        }
        let pi = iterate(&s, v_next, v_next, &PiterConfig::default()).unwrap();
        for (a, b) in pi.value.iter().zip(&best) {
            worst = worst.max((a - b).abs());
        }
        cases += 1;
    }
    outcome(
        worst <= 1e-9,
        format!("{} policies x {cases} terminal surfaces, max gap {worst:.2e}", policies.len()),
    )
}

fn c4_conditions() -> Outcome {
    let s = toy();
    let g = s.grid();
    let v_next = vec![0.0; g.len()];
    let policies = all_policies(g);
    let toy_fail = policies
        .iter()
        .filter(|p| !verify_theorem_conditions(&s.assemble_system(p, &v_next).unwrap()).passed())
        .count();
    let p = reference();
    let grid = build_grid(&p, GridSpec::default()).unwrap();
    let big = Scheme::new(p, grid, ExtrapolationMode::Clamp);
    let v_next = vec![0.0; big.grid().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples = 120;
    let mut big_fail = 0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..samples {
        let pol = random_policy(big.grid(), &mut rng);
        let report = verify_theorem_conditions(&big.assemble_system(&pol, &v_next).unwrap());
        min_margin = min_margin.min(report.min_margin);
        if !report.passed() {
            big_fail += 1;
        }
    }
    outcome(
        toy_fail == 0 && big_fail == 0,
        format!(
            "toy {} policies ({toy_fail} failing), reference grid {samples} random policies ({big_fail} failing), min dominance margin {min_margin:.3e}",
            policies.len()
        ),
    )
}

fn c5_monotonicity() -> Outcome {
    let p = reference();
    let grid = build_grid(&p, GridSpec::default()).unwrap();
    let s = Scheme::new(p, grid, ExtrapolationMode::Clamp);
    let m = s.grid().len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::INFINITY;
    let pairs = 1000;
    for _ in 0..pairs {
        let node = rng.random_range(0..m);
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..0.2)).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..0.2)).collect();
        let sparse = rng.random_bool(0.5);
        let mut u: Vec<f64> = w
            .iter()
            .map(|&x| {
                if sparse && rng.random_bool(0.9) {
                    x
                } else {
                    x + rng.random_range(0.0..0.1)
                }
            })
            .collect();
        u[node] = w[node];
        let eu = s.evaluate_node(node, &u, &r);
        let ew = s.evaluate_node(node, &w, &r);
        let su = eu.continuation.max(eu.impulse_value);
        let sw = ew.continuation.max(ew.impulse_value);
        worst = worst.min(su - sw);
    }
    outcome(worst >= -1e-12, format!("{pairs} pairs, min S(u) - S(w) = {worst:.3e}"))
}

fn c6_unconditional(sol: &Solution, c1: bool) -> Outcome {
    let p = reference();
    let cfl = explicit_cfl_factor(&p, sol.grid());
    let explicit = solve_explicit_baseline(&p, GridSpec::default(), ExtrapolationMode::Clamp);
    let detected = matches!(explicit, Err(Error::ExplicitInstability { .. }));
    let how = match &explicit {
        Err(e) => e.to_string(),
        Ok(_) => "explicit run finished".into(),
    };
    outcome(
        c1 && detected && (cfl - 500.1).abs() < 0.1,
        format!("cfl factor {cfl:.2}, implicit inside envelope: {c1}, explicit: {how}"),
    )
}

fn coarse() -> ModelParams {
    ModelParams::new(ModelConfig {
        alpha_cap: 30.0,
        inventory_cap: 2,
        horizon: 1.0,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn c7_cross_method() -> Outcome {
    let p = coarse();
    let spec = GridSpec::new(4000, 31);
    let cfl = explicit_cfl_factor(&p, &build_grid(&p, spec).unwrap());
    let implicit = solve(&p, spec, ExtrapolationMode::Clamp, &PiterConfig::default()).unwrap();
    let explicit = match solve_explicit_baseline(&p, spec, ExtrapolationMode::Clamp) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("explicit failed: {e}")),
    };
    let gap = max_difference_at_start(&implicit, &explicit).unwrap();
    outcome(
        cfl < 1.0 && gap <= 1e-2,
        format!("dt = {:.2e}, cfl factor {cfl:.3}, max |implicit - explicit| at t = 0: {gap:.3e}", implicit.grid().dt()),
    )
}

fn c8_refinement() -> Outcome {
    let p = coarse();
    match refinement_study(&p, GridSpec::new(10, 13), 3, ExtrapolationMode::Clamp, &PiterConfig::default()) {
        Ok(table) => {
            let d = table.differences();
            outcome(
                d.len() == 3 && table.is_contracting(),
                format!("differences {}", d.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ")),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn c9_monte_carlo(sol: &Solution) -> Outcome {
    let y0 = InitialState {
        cash: 0.0,
        price: 100.0,
        alpha: 0.0,
        inventory: 0,
    };
    let sim = SimulationConfig::default();
    let opt = match estimate_performance(sol, &y0, 10_000, 20240601, &sim) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let null = estimate_with(sol.params(), sol.grid(), &NullControl, &y0, 10_000, 20240601, &sim, predicted_value(sol, &y0)).unwrap();
    let combined = (opt.std_error.powi(2) + null.std_error.powi(2)).sqrt();
    outcome(
        opt.within(3.0) && opt.mean >= null.mean - 3.0 * combined,
        format!(
            "mean {:.6} +/- {:.6} vs v(0, 0, 0) = {:.6} (z = {:.2}); doing nothing earns {:.6}",
            opt.mean, opt.std_error, opt.predicted, opt.z_score, null.mean
        ),
    )
}

fn c10_structure(sol: &Solution) -> Outcome {
    let g = sol.grid();
    let j = g.q_index(0).unwrap();
    let c = |i: usize| sol.policy(0).controls[g.flatten(i, j)];
    let centre = c(g.alpha_center());
    let both_at_centre = centre.ask && centre.bid && !centre.intervene;
    let one_sided = |i: usize| {
        let k = c(i);
        k.intervene || k.ask != k.bid
    };
    let plus = (g.alpha_center()..g.n_alpha()).find(|&i| (i..g.n_alpha()).all(one_sided));
    let minus = (0..=g.alpha_center()).rev().find(|&i| (0..=i).all(one_sided));
    let market = (0..g.len()).filter(|&n| sol.policy(0).controls[n].intervene).count();
    let far = c(g.n_alpha() - 1).intervene && c(0).intervene;
    let (a_plus, a_minus) = (plus.map(|i| g.alphas()[i]), minus.map(|i| g.alphas()[i]));
    outcome(
        both_at_centre && a_plus.is_some_and(|a| a > 0.0) && a_minus.is_some_and(|a| a < 0.0) && far && market > 0,
        format!(
            "both quotes at alpha = 0: {both_at_centre}, one-sided beyond {a_plus:?} / {a_minus:?}, {market} market-order nodes"
        ),
    )
}

fn c11_reflection(sol: &Solution) -> Outcome {
    let g = sol.grid();
    let v = &sol.surface(0).values;
    let pol = &sol.policy(0).controls;
    let mut worst = 0.0f64;
    let mut mismatched = 0;
    for n in 0..g.len() {
        let r = g.reflect(n);
        worst = worst.max((v[n] - v[r]).abs());
        let (a, b) = (pol[n], pol[r]);
        let sides = a.ask == b.bid && a.bid == b.ask && a.intervene == b.intervene;
        let direction = !a.intervene || a.impulse == b.impulse.reversed();
        if !(sides && direction) {
            mismatched += 1;
        }
    }
    outcome(
        worst <= 1e-8 && mismatched == 0,
        format!("max |v(-alpha, -q) - v(alpha, q)| = {worst:.3e}, {mismatched} unreflected controls"),
    )
}

fn main() {
    let start = Instant::now();
    let cfg = PiterConfig::default();
    let sol = solve(&reference(), GridSpec::default(), ExtrapolationMode::Clamp, &cfg).expect("reference solve");
    println!("reference solve: {:.2?}", sol.elapsed);

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let c1 = c1_envelope(&sol);
    let c1_pass = c1.pass;
    results.push(("stability envelope", c1));
    results.push(("policy iteration monotone convergence", c2_monotone_convergence(&sol, &cfg)));
    results.push(("brute-force equivalence", c3_brute_force()));
    results.push(("matrix condition verifier", c4_conditions()));
    results.push(("scheme monotonicity", c5_monotonicity()));
    results.push(("unconditional stability", c6_unconditional(&sol, c1_pass)));
    results.push(("cross-method agreement", c7_cross_method()));
    results.push(("grid refinement", c8_refinement()));
    results.push(("Monte Carlo consistency", c9_monte_carlo(&sol)));
    results.push(("policy structure", c10_structure(&sol)));
    results.push(("reflection symmetry", c11_reflection(&sol)));

    let mut failed = 0;
    for (k, (name, o)) in results.iter().enumerate() {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {name}: {}", k + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {:.1?}", results.len() - failed, results.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
