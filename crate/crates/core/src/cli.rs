//! Command-line front end: argument parsing, run modes and file output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::config::{load_config, RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::grid::{build_grid, ExtrapolationMode, GridSpec};
use crate::model::ModelParams;
use crate::montecarlo::{estimate_performance, estimate_with, predicted_value, InitialState, SimulationConfig};
use crate::policy_iteration::Verification;
use crate::scheme::Scheme;
use crate::solver::{
    explicit_cfl_factor, max_difference_at_start, refinement_study, solve_backward, solve_explicit_baseline,
    NullControl, Solution,
};

#[derive(Debug, Parser)]
#[command(name = "mmqvi", version, about = "Optimal market making with limit and market orders")]
pub struct Args {
    /// Configuration file; built-in reference values when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["solve", "validate", "refine", "baseline"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// `clamp`, or `paper` / `linear` for linear extrapolation past the signal bound.
    #[arg(long)]
    pub extrapolation: Option<String>,
    #[arg(long, value_parser = ["off", "per-step", "exhaustive"])]
    pub verify: Option<String>,
    /// Also write per-iteration policy-iteration records.
    #[arg(long)]
    pub trace: bool,
}

impl Args {
    pub fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.mode {
            cfg.mode = m.parse()?;
        }
        if let Some(out) = self.out {
            cfg.out_dir = out;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(paths) = self.paths {
            cfg.paths = paths;
        }
        if let Some(e) = &self.extrapolation {
            cfg.extrapolation = e.parse::<ExtrapolationMode>()?;
        }
        if let Some(v) = &self.verify {
            cfg.piter.verification = v.parse::<Verification>()?;
        }
        cfg.trace |= self.trace;
        Ok(cfg)
    }
}

/// Decimal text with 12 significant digits, deterministic across runs.
pub fn format_number(x: f64) -> String {
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    if rounded == 0.0 {
        "0".to_string()
    } else if rounded.abs() < 1e-4 || rounded.abs() >= 1e15 {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

/// `value_t{level}.csv`: `alpha,q,v`, q-major then alpha ascending.
pub fn write_value_csv(sol: &Solution, level: usize, out: &mut impl Write) -> std::io::Result<()> {
    let g = sol.grid();
    writeln!(out, "alpha,q,v")?;
    for node in 0..g.len() {
        let (i, j) = g.unflatten(node);
        writeln!(
            out,
            "{},{},{}",
            format_number(g.alphas()[i]),
            g.q_of(j),
            format_number(sol.surface(level).values[node])
        )?;
    }
    Ok(())
}

/// `policy_t{level}.csv`: `alpha,q,la,lb,d,z`, same ordering as the value file.
pub fn write_policy_csv(sol: &Solution, level: usize, out: &mut impl Write) -> std::io::Result<()> {
    let g = sol.grid();
    writeln!(out, "alpha,q,la,lb,d,z")?;
    for (node, c) in sol.policy(level).controls.iter().enumerate() {
        let (i, j) = g.unflatten(node);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            format_number(g.alphas()[i]),
            g.q_of(j),
            u8::from(c.ask),
            u8::from(c.bid),
            u8::from(c.intervene),
            c.impulse.sign()
        )?;
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_solution(cfg: &RunConfig, sol: &Solution) -> Result<()> {
    let dir = &cfg.out_dir;
    let mut f = create(dir, "value_t0.csv")?;
    write_value_csv(sol, 0, &mut f).map_err(io)?;
    f.flush().map_err(io)?;
    let mut f = create(dir, "policy_t0.csv")?;
    write_policy_csv(sol, 0, &mut f).map_err(io)?;
    f.flush().map_err(io)?;
    let mut f = create(dir, "levels.tsv")?;
    writeln!(f, "level\titerations\tinterventions").map_err(io)?;
    for s in &sol.stats {
        writeln!(f, "{}\t{}\t{}", s.level, s.iterations, s.interventions).map_err(io)?;
    }
    f.flush().map_err(io)?;
    if cfg.trace {
        let mut f = create(dir, "trace.tsv")?;
        writeln!(f, "level\titeration\tdigest\tinterventions\tmetric\tmin_increment\tsolve_residual").map_err(io)?;
        for (level, t) in sol.traces.iter().enumerate() {
            t.write_tsv(level, &mut f).map_err(io)?;
        }
        f.flush().map_err(io)?;
    }
    let late = sol.horizon_monotonicity_violations(1e-10);
    if !late.is_empty() {
        log::info!("value at q = 0 decreases with remaining time on {} levels", late.len());
    }
    Ok(())
}

/// Headline numbers from a run, for logging and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub lines: Vec<String>,
}

fn implicit(cfg: &RunConfig, p: &ModelParams, spec: GridSpec) -> Result<Solution> {
    let grid = build_grid(p, spec)?;
    solve_backward(Scheme::new(p.clone(), grid, cfg.extrapolation), &cfg.piter)
}

/// Executes the configured mode. Errors carry the failing module, level or node.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let p = cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io(format!("{}: {e}", cfg.out_dir.display())))?;
    let mut summary = RunSummary::default();
    match cfg.mode {
        RunMode::Solve => {
            let sol = implicit(cfg, &p, cfg.grid)?;
            write_solution(cfg, &sol)?;
            summary.lines.push(format!("v(0, 0, 0) = {}", format_number(sol.value_interpolated(0, 0.0, 0))));
        }
        RunMode::Validate => {
            let sol = implicit(cfg, &p, cfg.grid)?;
            write_solution(cfg, &sol)?;
            let y0 = InitialState::default();
            let sim = SimulationConfig {
                substeps: cfg.mc_substeps,
                impulse_moves_alpha: cfg.impulse_moves_alpha,
                record: false,
            };
            let opt = estimate_performance(&sol, &y0, cfg.paths, cfg.seed, &sim)?;
            let null = estimate_with(&p, sol.grid(), &NullControl, &y0, cfg.paths, cfg.seed, &sim, predicted_value(&sol, &y0))?;
            let mut f = create(&cfg.out_dir, "validate.txt")?;
            writeln!(f, "paths\t{}", opt.paths).map_err(io)?;
            writeln!(f, "predicted\t{}", format_number(opt.predicted)).map_err(io)?;
            writeln!(f, "mean\t{}", format_number(opt.mean)).map_err(io)?;
            writeln!(f, "std_error\t{}", format_number(opt.std_error)).map_err(io)?;
            writeln!(f, "z_score\t{}", format_number(opt.z_score)).map_err(io)?;
            writeln!(f, "null_mean\t{}", format_number(null.mean)).map_err(io)?;
            writeln!(f, "null_std_error\t{}", format_number(null.std_error)).map_err(io)?;
            f.flush().map_err(io)?;
            summary.lines.push(format!(
                "mean {} +/- {} vs predicted {} (z = {:.3})",
                opt.mean, opt.std_error, opt.predicted, opt.z_score
            ));
            if !opt.within(3.0) {
                return Err(Error::Simulation(format!(
                    "Monte Carlo mean {} is {:.2} standard errors from the predicted {}",
                    opt.mean, opt.z_score, opt.predicted
                )));
            }
            let combined = (opt.std_error.powi(2) + null.std_error.powi(2)).sqrt();
            if opt.mean < null.mean - 3.0 * combined {
                return Err(Error::Simulation(format!(
                    "optimal policy ({}) underperforms doing nothing ({})",
                    opt.mean, null.mean
                )));
            }
        }
        RunMode::Refine => {
            let table = refinement_study(&p, cfg.grid, cfg.refine_rounds, cfg.extrapolation, &cfg.piter)?;
            let mut f = create(&cfg.out_dir, "refine.csv")?;
            let mut header = vec!["time_steps".to_string(), "alpha_points".to_string()];
            header.extend(table.probes.iter().map(|pp| format!("v({}|{})", format_number(pp.alpha), pp.q)));
            header.push("difference".to_string());
            writeln!(f, "{}", header.join(",")).map_err(io)?;
            for row in &table.rows {
                let mut cols = vec![row.spec.n_time_steps.to_string(), row.spec.n_alpha_points.to_string()];
                cols.extend(row.values.iter().map(|v| format_number(*v)));
                cols.push(row.difference.map(format_number).unwrap_or_default());
                writeln!(f, "{}", cols.join(",")).map_err(io)?;
            }
            f.flush().map_err(io)?;
            summary.lines.push(format!("differences {:?}", table.differences()));
            if !table.is_contracting() {
                return Err(Error::ConditionViolation(format!(
                    "refinement differences do not decrease: {:?}",
                    table.differences()
                )));
            }
        }
        RunMode::Baseline => {
            let sol = implicit(cfg, &p, cfg.grid)?;
            write_solution(cfg, &sol)?;
            let spec = GridSpec::new(cfg.explicit_time_steps.unwrap_or(cfg.grid.n_time_steps), cfg.grid.n_alpha_points);
            let cfl = explicit_cfl_factor(&p, &build_grid(&p, spec)?);
            let mut f = create(&cfg.out_dir, "baseline.txt")?;
            writeln!(f, "explicit_time_steps\t{}", spec.n_time_steps).map_err(io)?;
            writeln!(f, "cfl_factor\t{}", format_number(cfl)).map_err(io)?;
            match solve_explicit_baseline(&p, spec, cfg.extrapolation) {
                Ok(explicit) => {
                    writeln!(f, "explicit\tstable").map_err(io)?;
                    if spec.n_time_steps == cfg.grid.n_time_steps {
                        let gap = max_difference_at_start(&sol, &explicit)?;
                        writeln!(f, "max_difference_t0\t{}", format_number(gap)).map_err(io)?;
                    } else {
                        let gap = max_difference_at_start(&implicit(cfg, &p, spec)?, &explicit)?;
                        writeln!(f, "max_difference_t0\t{}", format_number(gap)).map_err(io)?;
                    }
                }
                Err(e @ Error::ExplicitInstability { .. }) => {
                    writeln!(f, "explicit\tunstable\t{e}").map_err(io)?;
                    summary.lines.push(format!("explicit scheme unstable: {e}"));
                }
                Err(e) => return Err(e),
            }
            f.flush().map_err(io)?;
            summary.lines.push(format!("cfl factor {}", format_number(cfl)));
        }
    }
    Ok(summary)
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args(args: Args) -> i32 {
    let cfg = match args.into_config() {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            return 2;
        }
    };
    match run(&cfg) {
        Ok(summary) => {
            for line in summary.lines {
                log::info!("{line}");
            }
            0
        }
        Err(e) => {
            log::error!("{e}");
            1
        }
    }
}
