//! Randomised invariants of the scheme, the iteration and the simulator.

use mmqvi::grid::{build_grid, ExtrapolationMode, GridSpec};
use mmqvi::linsolve::{solve as linear_solve, SolveOptions};
use mmqvi::model::{stability_bounds, ModelConfig, ModelParams};
use mmqvi::montecarlo::{simulate_path, InitialState, SimulationConfig};
use mmqvi::policy_iteration::{iterate, verify_theorem_conditions, PiterConfig};
use mmqvi::scheme::{admissible_controls, Impulse, Policy, Scheme};
use mmqvi::solver::solve;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = ModelConfig> {
    (
        (0.2f64..2.0, 0.001f64..0.05, 0.01f64..1.0, 0.0f64..0.02, 0.001f64..0.02),
        (0.2f64..3.0, 0.2f64..3.0, 0.5f64..50.0, 0.1f64..3.0),
        (1.0f64..40.0, 1.0f64..40.0, 0.0f64..0.01, 0.0f64..0.01, 1i32..4, 5.0f64..40.0),
    )
        .prop_map(|((horizon, tick, theta, half_spread, taker_fee), (la, lb, k, rho), (ga, gb, phi, psi, cap, a))| ModelConfig {
            horizon,
            tick,
            base_intensity: theta,
            half_spread,
            taker_fee,
            mo_buy_rate: la,
            mo_sell_rate: lb,
            mean_reversion: k,
            signal_vol: rho,
            jump_up: ga,
            jump_down: gb,
            running_penalty: phi,
            terminal_penalty: psi,
            inventory_cap: cap,
            alpha_cap: a,
        })
}

fn scheme(cfg: ModelConfig, n: usize, alphas: usize) -> Scheme {
    let p = ModelParams::new(cfg).unwrap();
    let g = build_grid(&p, GridSpec::new(n, alphas)).unwrap();
    Scheme::new(p, g, ExtrapolationMode::Clamp)
}

fn surface(seed: &[f64], m: usize) -> Vec<f64> {
    (0..m).map(|i| seed[i % seed.len()] * (1.0 + (i % 7) as f64 * 0.1)).collect()
}

fn policy_from(s: &Scheme, picks: &[usize]) -> Policy {
    let g = s.grid();
    let mut controls: Vec<_> = (0..g.len())
        .map(|n| {
            let c = admissible_controls(g, n);
            c[picks[n % picks.len()] % c.len()]
        })
        .collect();
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_is_monotone(cfg in params(), w in prop::collection::vec(-0.5f64..0.5, 7),
                            bump in prop::collection::vec(0.0f64..0.3, 5), r in prop::collection::vec(-0.5f64..0.5, 3),
                            node_pick in 0usize..10_000) {
        let s = scheme(cfg, 4, 9);
        let m = s.grid().len();
        let node = node_pick % m;
        let w = surface(&w, m);
        let r = surface(&r, m);
        let mut u: Vec<f64> = w.iter().enumerate().map(|(i, x)| x + bump[i % bump.len()]).collect();
        u[node] = w[node];
        let (su, _) = s.residual(&u, &r);
        let (sw, _) = s.residual(&w, &r);
        prop_assert!(su[node] >= sw[node] - 1e-12);
    }

    #[test]
    fn every_admissible_policy_gives_an_m_matrix(cfg in params(), picks in prop::collection::vec(0usize..6, 1..40)) {
        let s = scheme(cfg, 5, 11);
        let p = policy_from(&s, &picks);
        p.validate(s.grid()).unwrap();
        let sys = s.assemble_system(&p, &vec![0.0; s.grid().len()]).unwrap();
        let report = verify_theorem_conditions(&sys);
        prop_assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn fixed_point_dominates_every_policy(cfg in params(), picks in prop::collection::vec(0usize..6, 1..40),
                                          next in prop::collection::vec(-0.2f64..0.2, 1..6)) {
        let s = scheme(cfg, 5, 11);
        let m = s.grid().len();
        let v_next = surface(&next, m);
        let out = iterate(&s, &v_next, &v_next, &PiterConfig::default()).unwrap();
        for r in out.trace.records.iter().skip(1) {
            prop_assert!(r.min_increment >= -1e-9);
        }
        let p = policy_from(&s, &picks);
        let sys = s.assemble_system(&p, &v_next).unwrap();
        let x = linear_solve(&sys.matrix, &sys.rhs, &SolveOptions::default()).unwrap().solution;
        for (a, b) in out.value.iter().zip(&x) {
            prop_assert!(*a >= b - 1e-9);
        }
    }

    #[test]
    fn surfaces_stay_inside_the_envelope(cfg in params(), n in 1usize..12) {
        let p = ModelParams::new(cfg).unwrap();
        let sol = solve(&p, GridSpec::new(n, 11), ExtrapolationMode::Clamp, &PiterConfig::default()).unwrap();
        for s in sol.surfaces() {
            let (lo, hi) = stability_bounds(&p, s.time).unwrap();
            prop_assert!(s.values.iter().all(|&v| v.is_finite() && v >= lo - 1e-8 && v <= hi + 1e-8));
        }
    }

    #[test]
    fn symmetric_markets_give_mirrored_values(cfg in params(), n in 1usize..8) {
        let cfg = ModelConfig { mo_sell_rate: cfg.mo_buy_rate, jump_down: cfg.jump_up, ..cfg };
        let p = ModelParams::new(cfg).unwrap();
        let sol = solve(&p, GridSpec::new(n, 11), ExtrapolationMode::Clamp, &PiterConfig::default()).unwrap();
        let g = sol.grid();
        let v = &sol.surface(0).values;
        let scale = 1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for node in 0..g.len() {
            prop_assert!((v[node] - v[g.reflect(node)]).abs() <= 1e-8 * scale);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_paths_keep_their_books(cfg in params(), seed in any::<u64>(), q0 in -3i32..=3, a0 in -40.0f64..40.0) {
        let p = ModelParams::new(cfg).unwrap();
        let sol = solve(&p, GridSpec::new(10, 11), ExtrapolationMode::Clamp, &PiterConfig::default()).unwrap();
        let cap = p.inventory_cap;
        let y0 = InitialState { inventory: q0.clamp(-cap, cap), alpha: a0, ..InitialState::default() };
        for path in 0..5 {
            let rec = simulate_path(&sol, &y0, seed, path, &SimulationConfig::default()).unwrap();
            prop_assert!(rec.trajectory.iter().all(|pt| pt.inventory.abs() <= cap && pt.alpha.abs() <= p.alpha_cap));
            prop_assert!((rec.replay_cash() - rec.final_state.cash).abs() < 1e-8);
            prop_assert!(rec.max_burst <= 2 * cap as usize);
        }
    }
}
