//! Scenario-driven batch runner.

pub mod config;
pub mod output;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::action::{action_exact_simple, action_mc, ActionError, ActionEstimate};
use crate::coupling::ProbabilityVector;
use crate::hamiltonian::{legendre_transform, LagrangianTable};
use crate::paths::{path_rng, realize_control, sample_paths, sample_with_rng, write_curve, write_path, PathError};
use crate::solver::{
    admissible_check, aubry_indicator, critical_value, lagrangian_for, pinned_value, residual_tolerance,
    subsolution_verify, supersolution_residual, GammaReport, PinnedSolve, ResidualSummary, SolverError,
};
pub use config::{ConfigError, Overrides, ScenarioConfig};

/// The scalar-cosine scenario run by `selftest`.
pub const SELFTEST_SCENARIO: &str = include_str!("../../scenarios/scalar_cosine.toml");

#[derive(Debug, Parser)]
#[command(name = "hjframe", version, about = "Random frames, action functionals and pinned value functions for weakly coupled Hamilton-Jacobi systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (TOML, or a report.json from an earlier run).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; does not affect any output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write sampled index paths and curves.
    #[arg(long, global = true)]
    pub dump_paths: bool,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Pin point, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub pin_y: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Pinned value function at the configured or critical level.
    Solve,
    /// Critical value by discounted approximation and bisection.
    Gamma,
    /// Sub/supersolution residuals of the pinned value function.
    Verify,
    /// Whether the pin vector b is an admissible value.
    Admissible,
    /// Aubry indicator at the pin point.
    Aubry,
    /// Monte Carlo (and, when available, exact) action estimates.
    Action,
    /// Sample index paths.
    Sample,
    /// Run the bundled scalar-cosine scenario and check its critical value.
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Gamma => "gamma",
            Command::Verify => "verify",
            Command::Admissible => "admissible",
            Command::Aubry => "aubry",
            Command::Action => "action",
            Command::Sample => "sample",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("--config is required for `{0}`")]
    MissingConfig(&'static str),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::MissingConfig(_) => 2,
            _ => 1,
        }
    }
}

/// Result of one subcommand: the report body and whether its check passed.
struct Outcome {
    body: Value,
    ok: bool,
}

struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn create(&self, name: &str) -> Result<BufWriter<File>, RunError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        File::create(&path).map(BufWriter::new).map_err(|e| io_err(&path, e))
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), RunError> {
        let mut w = self.create(name)?;
        f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(&self.dir.join(name), e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses the configuration, runs the subcommand and writes its artifacts.
/// Returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match run_inner(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(cli: &Cli) -> Result<bool, RunError> {
    let ov = Overrides {
        seed: cli.seed,
        alpha: cli.alpha,
        pin_y: cli.pin_y.clone(),
        samples: cli.samples,
        out: cli.out.clone(),
    };
    let cfg = match (cli.command, &cli.config) {
        (Command::Selftest, None) => ScenarioConfig::from_text_with(SELFTEST_SCENARIO, "selftest", &ov)?,
        (_, Some(path)) => ScenarioConfig::load_with(path, &ov)?,
        (cmd, None) => return Err(RunError::MissingConfig(cmd.name())),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Threads(e.to_string()))?;
    let art = Artifacts {
        dir: cfg.output.dir.clone(),
    };
    fs::create_dir_all(&art.dir).map_err(|e| io_err(&art.dir, e))?;
    let outcome = pool.install(|| dispatch(cli.command, &cfg, &art, cli.dump_paths))?;
    let report = json!({
        "command": cli.command.name(),
        "config": cfg,
        "result": outcome.body,
        "ok": outcome.ok,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    art.write("report.json", |w| writeln!(w, "{text}"))?;
    Ok(outcome.ok)
}

fn dispatch(cmd: Command, cfg: &ScenarioConfig, art: &Artifacts, dump: bool) -> Result<Outcome, RunError> {
    match cmd {
        Command::Solve => solve(cfg, art, dump, false),
        Command::Verify => solve(cfg, art, dump, true),
        Command::Gamma => {
            let table = table_for(cfg, 0.0)?;
            let g = critical_value(&table, &cfg.coupling_matrix(), &cfg.gamma_options())?;
            Ok(Outcome {
                ok: g.agree,
                body: to_value(&g),
            })
        }
        Command::Admissible => {
            let (table, alpha, gamma) = table_and_level(cfg)?;
            let v = admissible_check(
                &table,
                &cfg.coupling_matrix(),
                &cfg.pin.y,
                &cfg.pin.b,
                alpha,
                &cfg.dpp(),
                cfg.evidence(),
            )?;
            Ok(Outcome {
                ok: true,
                body: json!({ "alpha": alpha, "gamma": gamma, "verdict": v }),
            })
        }
        Command::Aubry => {
            let (table, alpha, gamma) = table_and_level(cfg)?;
            let v = aubry_indicator(
                &table,
                &cfg.hamiltonian(),
                &cfg.coupling_matrix(),
                &cfg.pin.y,
                alpha,
                &cfg.dpp(),
                cfg.solver.residual_tol,
                cfg.seed,
            )?;
            art.write("value.csv", |w| output::write_field_csv(w, &v.field))?;
            art.write("value.dat", |w| output::write_field_dat(w, &v.field))?;
            Ok(Outcome {
                ok: true,
                body: json!({ "gamma": gamma, "verdict": v }),
            })
        }
        Command::Action => action(cfg, art, dump),
        Command::Sample => sample(cfg, art),
        Command::Selftest => {
            let table = table_for(cfg, 0.0)?;
            let g = critical_value(&table, &cfg.coupling_matrix(), &cfg.gamma_options())?;
            let pass = g.agree && (g.gamma - 1.0).abs() <= 0.05;
            Ok(Outcome {
                ok: pass,
                body: json!({ "gamma": g.gamma, "report": g, "expected": 1.0, "pass": pass }),
            })
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn table_for(cfg: &ScenarioConfig, alpha_top: f64) -> Result<LagrangianTable, RunError> {
    let (table, _) = lagrangian_for(
        &cfg.hamiltonian(),
        &cfg.coupling_matrix(),
        &cfg.torus_grid(),
        alpha_top,
        cfg.solver.spread_bound,
        cfg.solver.velocity_points,
    )?;
    Ok(table)
}

/// The table and the level to work at: the configured `α`, or the smallest
/// level at which the pinned solve converged.
fn table_and_level(cfg: &ScenarioConfig) -> Result<(LagrangianTable, f64, Option<GammaReport>), RunError> {
    match cfg.solver.alpha {
        Some(a) => Ok((table_for(cfg, a)?, a, None)),
        None => {
            let table = table_for(cfg, 0.0)?;
            let g = critical_value(&table, &cfg.coupling_matrix(), &cfg.gamma_options())?;
            Ok((table, g.gamma_upper, Some(g)))
        }
    }
}

fn solve(cfg: &ScenarioConfig, art: &Artifacts, dump: bool, verify: bool) -> Result<Outcome, RunError> {
    let (table, alpha, gamma) = table_and_level(cfg)?;
    let spec = cfg.hamiltonian();
    let coupling = cfg.coupling_matrix();
    let PinnedSolve {
        field,
        mut report,
        policy,
    } = pinned_value(&table, &coupling, &cfg.pin.y, &cfg.pin.b, alpha, &cfg.dpp())?;
    report.gamma = gamma.as_ref().map(|g| g.gamma);
    let tol = match cfg.solver.residual_tol {
        Some(t) => t,
        None => residual_tolerance(&spec, &coupling, field.grid(), alpha, field.mode_spread(), cfg.solver.dt)?,
    };
    let sub = subsolution_verify(&field, &spec, &coupling, alpha, tol)?;
    let sup = supersolution_residual(&field, &spec, &coupling, alpha)?;
    report.residual = Some(ResidualSummary {
        sub_max: sub.max_residual,
        super_min: sup.extreme,
        tol,
    });
    art.write("value.csv", |w| output::write_field_csv(w, &field))?;
    art.write("value.dat", |w| output::write_field_dat(w, &field))?;
    if verify {
        art.write("residual_sub.csv", |w| output::write_field_csv(w, &sub.residual))?;
        art.write("residual_super.csv", |w| output::write_field_csv(w, &sup.field))?;
    }
    if dump {
        // trajectories of the extracted feedback from the action start point
        let control = policy.control();
        let grid = field.grid();
        let rule = policy.stopping_rule(&cfg.pin.y, grid.spacing(), cfg.action.cap.unwrap_or(10.0));
        let a = ProbabilityVector::new(cfg.action.initial.clone()).map_err(SolverError::from)?;
        for k in 0..cfg.sample.count {
            let path = sample_with_rng(&coupling, &a, rule.cap(), &mut path_rng(cfg.seed, k as u64));
            let real = realize_control(&control, &path, &cfg.action.x, rule.cap(), cfg.action.dt_curve, table.q_max())?;
            let tau = rule
                .evaluate_along(&path, Some((&real.curve, &cfg.action.x)))
                .map_err(ActionError::from)?;
            let m = coupling.m();
            art.write(&format!("paths/path_{k}.txt"), |w| write_path(w, m, grid.dim(), &path))?;
            art.write(&format!("paths/curve_{k}.txt"), |w| write_curve(w, m, &cfg.action.x, &real.curve))?;
            art.write(&format!("paths/tau_{k}.txt"), |w| writeln!(w, "{tau}"))?;
        }
    }
    let ok = !verify || (sub.pass && sup.extreme >= -tol);
    let mut body = json!({ "solve": report, "gamma_report": gamma });
    if verify {
        body["subsolution"] = to_value(&sub);
        body["super_min"] = json!(sup.extreme);
        body["super_worst"] = json!({ "node": sup.node, "mode": sup.mode });
        body["pass"] = json!(ok);
    }
    Ok(Outcome { body, ok })
}

fn action(cfg: &ScenarioConfig, art: &Artifacts, dump: bool) -> Result<Outcome, RunError> {
    let coupling = cfg.coupling_matrix();
    let spec = cfg.hamiltonian();
    let grid = cfg.torus_grid();
    let alphas = if cfg.action.alphas.is_empty() {
        vec![cfg.solver.alpha.unwrap_or(0.0)]
    } else {
        cfg.action.alphas.clone()
    };
    let top = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (_, bound) = lagrangian_for(&spec, &coupling, &grid, top, cfg.solver.spread_bound, None)?;
    // the box must contain the commanded velocity
    let vmax = cfg.action.velocity.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let q_max = bound.q_max.max(1.05 * vmax);
    let n_q = cfg
        .solver
        .velocity_points
        .unwrap_or_else(|| crate::solver::default_velocity_points(&grid, q_max));
    let table = legendre_transform(&spec, &grid, q_max, n_q).map_err(SolverError::from)?;
    let policy = cfg.action_policy();
    let rule = cfg.action_rule();
    let a = ProbabilityVector::new(cfg.action.initial.clone()).map_err(SolverError::from)?;
    let mut series: Vec<ActionEstimate> = Vec::new();
    let mut exact = Vec::new();
    for &alpha in &alphas {
        series.push(action_mc(&table, &coupling, &cfg.action.x, &policy, &rule, &a, alpha, cfg.sampling())?);
        exact.push(
            match action_exact_simple(&table, &coupling, &cfg.action.x, &policy, &rule, &a, alpha) {
                Ok(e) => json!({ "alpha": alpha, "value": e.value, "expected_tau": e.expected_tau }),
                Err(ActionError::Unsupported(why)) => json!({ "alpha": alpha, "unsupported": why }),
                Err(e) => return Err(e.into()),
            },
        );
    }
    art.write("action.dat", |w| output::write_action_series(w, &series))?;
    if dump {
        dump_paths(cfg, art, &a, rule.cap() + 1.0)?;
    }
    Ok(Outcome {
        ok: true,
        body: json!({ "estimates": series, "exact": exact }),
    })
}

fn dump_paths(cfg: &ScenarioConfig, art: &Artifacts, a: &ProbabilityVector, horizon: f64) -> Result<Vec<crate::paths::IndexPath>, RunError> {
    let coupling = cfg.coupling_matrix();
    let paths = sample_paths(&coupling, a, horizon, cfg.seed, cfg.sample.count);
    for (k, p) in paths.iter().enumerate() {
        art.write(&format!("paths/path_{k}.txt"), |w| write_path(w, coupling.m(), cfg.grid.dim, p))?;
    }
    Ok(paths)
}

fn sample(cfg: &ScenarioConfig, art: &Artifacts) -> Result<Outcome, RunError> {
    let a = ProbabilityVector::new(cfg.sample.initial.clone()).map_err(SolverError::from)?;
    let paths = dump_paths(cfg, art, &a, cfg.sample.horizon)?;
    let summary: Vec<Value> = paths
        .iter()
        .map(|p| {
            json!({
                "initial": p.initial(),
                "jumps": p.jumps().len(),
                "final": p.evaluate(p.horizon()),
            })
        })
        .collect();
    Ok(Outcome {
        ok: true,
        body: json!({ "horizon": cfg.sample.horizon, "paths": summary }),
    })
}
