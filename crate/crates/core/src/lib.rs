//! Market-making value function and policy via an implicit finite-difference
//! scheme for the HJB quasi-variational inequality, solved by policy iteration,
//! with a Monte Carlo check of the result.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
    }};
}

pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod linsolve;
pub mod model;
pub mod montecarlo;
pub mod policy_iteration;
pub mod scheme;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{build_grid, ExtrapolationMode, Grid, GridSpec};
pub use model::{ModelConfig, ModelParams};
pub use montecarlo::{estimate_performance, simulate_path, EstimateReport, InitialState, PathRecord, SimulationConfig};
pub use policy_iteration::{PiterConfig, Verification};
pub use scheme::{Impulse, NodeControl, Policy, Scheme};
pub use solver::{solve, solve_backward, solve_explicit_baseline, ControlLaw, NullControl, Solution, ValueSurface};
