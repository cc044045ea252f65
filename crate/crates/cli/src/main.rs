//! `steer` — covariance steering runs from a TOML config.
//!
//! Each subcommand reads one config file, runs one solver, and drops its
//! results in the output directory: CSV tables plus a `manifest.json`
//! recording what ran, how hard it worked, and how well it converged. The
//! manifest is written even when the solver gives up, so a result
//! directory always says what happened to it.
//!
//! Exit codes: 0 — solved to tolerance; 2 — the solver ran but did not
//! converge (results and manifest are still written, best effort);
//! 1 — the run never started: unreadable or malformed config, shape
//! mismatches, bad flags.

mod artifacts;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use steer_core::pde::{self, Field, FieldKind, GridModel, Mesh, PdeError, TimeField};
use steer_core::riccati::{self, RiccatiError};
use steer_core::sdp::{self, SolveStatus, SolverOptions};
use steer_core::sim;
use steer_core::{cost_functional, validate_problem, GainSchedule, SteeringProblem, TimeGrid};

use artifacts::Manifest;
use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "steer",
    version,
    about = "Steer the covariance of a linear stochastic system between endpoint Gaussians"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the convex transcription; writes gains.csv, covariance.csv.
    SteerSdp(RunArgs),
    /// Solve the coupled quadratic flows by shooting; writes gains.csv,
    /// covariance.csv, factors.csv.
    SteerRiccati(RunArgs),
    /// Fixed-point the grid propagators on the endpoint marginals
    /// (scalar problems); writes control.csv, density.csv.
    SteerPde(RunArgs),
    /// Sample closed-loop paths under a gain table; writes paths.csv and
    /// the empirical covariance.csv.
    Simulate(RunArgs),
    /// Check a config and report problem diagnostics without solving.
    Validate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides [output].directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Time intervals N; overrides [numeric].steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Convergence tolerance; overrides [numeric].tol.
    #[arg(long)]
    tol: Option<f64>,
    /// Sampling seed for simulate; overrides [numeric].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Path count for simulate; overrides [numeric].paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Gain table for simulate (a gains.csv from steer-sdp or
    /// steer-riccati); omitted, the ensemble runs uncontrolled.
    #[arg(long)]
    gains: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] artifacts::ArtifactError),
    #[error(transparent)]
    Model(#[from] steer_core::ModelError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version land on stdout and exit clean; genuine flag
            // errors are config errors in this tool's vocabulary: exit 1.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let (method, args) = match &cli.command {
        Command::SteerSdp(a) => (Method::Sdp, a),
        Command::SteerRiccati(a) => (Method::Riccati, a),
        Command::SteerPde(a) => (Method::Pde, a),
        Command::Simulate(a) => (Method::Simulate, a),
        Command::Validate(a) => {
            return match validate(a) {
                Ok(code) => code,
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(1)
                }
            }
        }
    };
    match run(method, args) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Method {
    Sdp,
    Riccati,
    Pde,
    Simulate,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Sdp => "sdp",
            Method::Riccati => "riccati",
            Method::Pde => "pde",
            Method::Simulate => "simulate",
        }
    }
}

/// Numeric settings after flag overrides, re-checked so a bad flag value
/// fails exactly like a bad config value.
struct Settings {
    out_dir: PathBuf,
    steps: usize,
    tol: f64,
    max_iters: usize,
    seed: u64,
    paths: usize,
    substeps: usize,
}

impl Settings {
    fn merge(cfg: &RunConfig, args: &RunArgs) -> Result<Self, CliError> {
        let steps = args.steps.unwrap_or(cfg.numeric.steps);
        if steps == 0 {
            return Err(invalid("--steps must be at least 1"));
        }
        let tol = args.tol.unwrap_or(cfg.numeric.tol);
        if !(tol > 0.0 && tol < 1.0) {
            return Err(invalid(format!("--tol must lie in (0, 1), got {tol}")));
        }
        let paths = args.paths.unwrap_or(cfg.numeric.paths);
        if paths == 0 {
            return Err(invalid("--paths must be at least 1"));
        }
        Ok(Settings {
            out_dir: args
                .out
                .clone()
                .unwrap_or_else(|| cfg.output.directory.clone()),
            steps,
            tol,
            max_iters: cfg.numeric.max_iters,
            seed: args.seed.unwrap_or(cfg.numeric.seed),
            paths,
            substeps: cfg.numeric.substeps,
        })
    }
}

/// What a solver run produced, before anything touches the disk.
struct RunOutcome {
    status: String,
    exit: u8,
    /// Effective intervals (differs from the config when simulate adopts
    /// the grid of a supplied gain table).
    steps: usize,
    /// Effective tolerance (the shooting solver runs at its own).
    tol: f64,
    iterations: usize,
    residuals: BTreeMap<String, f64>,
    objective: Option<f64>,
    tables: Vec<(&'static str, Vec<u8>)>,
}

fn run(method: Method, args: &RunArgs) -> Result<ExitCode, CliError> {
    let (cfg, sha) = RunConfig::load(&args.config)?;
    let settings = Settings::merge(&cfg, args)?;
    let p = cfg.problem()?;

    let out = settings.out_dir.clone();
    fs::create_dir_all(&out).map_err(|source| CliError::Io {
        context: format!("cannot create {}", out.display()),
        source,
    })?;

    let started = Instant::now();
    let outcome = match method {
        Method::Sdp => run_sdp(&p, &settings)?,
        Method::Riccati => run_riccati(&p, &settings)?,
        Method::Pde => run_pde(&cfg, &p, &settings)?,
        Method::Simulate => run_simulate(&p, &settings, args)?,
    };
    let wall_ms = started.elapsed().as_millis() as u64;

    if cfg.output.wants_csv() {
        for (name, bytes) in &outcome.tables {
            write_out(&out.join(name), bytes)?;
        }
    }
    let manifest = Manifest {
        config_sha256: sha,
        method: method.name().into(),
        n: p.n(),
        m: p.m(),
        steps: outcome.steps,
        tol: outcome.tol,
        iterations: outcome.iterations,
        residuals: outcome.residuals,
        objective: outcome.objective,
        wall_ms,
        status: outcome.status.clone(),
    };
    write_out(&out.join("manifest.json"), &manifest.to_json())?;

    if outcome.exit == 0 {
        println!(
            "{}: {} ({} iterations, {} ms) -> {}",
            method.name(),
            outcome.status,
            outcome.iterations,
            wall_ms,
            out.display()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "{}: {} after {} iterations; manifest in {}",
            method.name(),
            outcome.status,
            outcome.iterations,
            out.display()
        );
        Ok(ExitCode::from(2))
    }
}

fn write_out(path: &std::path::Path, bytes: &[u8]) -> Result<(), CliError> {
    artifacts::write_atomic(path, bytes).map_err(|source| CliError::Io {
        context: format!("cannot write {}", path.display()),
        source,
    })
}

fn run_sdp(p: &SteeringProblem, s: &Settings) -> Result<RunOutcome, CliError> {
    let prog = sdp::discretize(p, s.steps)?;
    let opts = SolverOptions {
        max_iters: s.max_iters,
        eps_primal: s.tol,
        eps_dual: s.tol,
        ..SolverOptions::default()
    };
    let sol = sdp::solve(&prog, &opts)?;
    let stats = sol.stats.clone();
    let (mut status, mut exit) = match stats.status {
        SolveStatus::Converged => ("converged".to_string(), 0u8),
        SolveStatus::IterationCap => ("iteration_cap".to_string(), 2),
        SolveStatus::InfeasibleDetected => ("infeasible".to_string(), 2),
    };
    let mut tables = vec![(
        "covariance.csv",
        artifacts::covariance_csv(prog.grid(), &sol.sigmas)?,
    )];
    match sdp::recover_gains(&sol.sigmas, &sol.inputs, prog.grid()) {
        Ok(k) => tables.insert(0, ("gains.csv", artifacts::gains_csv(&k))),
        Err(err) => {
            eprintln!("gain recovery failed: {err}");
            if exit == 0 {
                status = "singular_covariance".into();
                exit = 2;
            }
        }
    }
    Ok(RunOutcome {
        status,
        exit,
        steps: s.steps,
        tol: s.tol,
        iterations: stats.iterations,
        residuals: BTreeMap::from([
            ("primal".to_string(), stats.primal_residual),
            ("dual".to_string(), stats.dual_residual),
        ]),
        objective: Some(stats.objective),
        tables,
    })
}

fn run_riccati(p: &SteeringProblem, s: &Settings) -> Result<RunOutcome, CliError> {
    let grid = TimeGrid::uniform(p.horizon, s.steps)?;
    let sol = match riccati::solve_coupled(p, &grid, None) {
        Ok(sol) => sol,
        Err(RiccatiError::NoConvergence {
            residual,
            iterations,
        }) => {
            return Ok(RunOutcome {
                status: "iteration_cap".into(),
                exit: 2,
                steps: s.steps,
                tol: riccati::SHOOTING_TOL,
                iterations,
                residuals: BTreeMap::from([("boundary".to_string(), residual)]),
                objective: None,
                tables: Vec::new(),
            })
        }
        Err(RiccatiError::BlowUp { time }) => {
            return Ok(RunOutcome {
                status: "diverged".into(),
                exit: 2,
                steps: s.steps,
                tol: riccati::SHOOTING_TOL,
                iterations: 0,
                residuals: BTreeMap::from([("blow_up_time".to_string(), time)]),
                objective: None,
                tables: Vec::new(),
            })
        }
        Err(err) => return Err(err.into()),
    };

    let k = GainSchedule::new(grid.clone(), sol.gains(p))?;
    let (c, chat) = riccati::normalizers(&sol, p);
    let mut tables = vec![
        ("gains.csv", artifacts::gains_csv(&k)),
        ("factors.csv", artifacts::factors_csv(&sol, &c, &chat)),
    ];
    let residuals = BTreeMap::from([("boundary".to_string(), sol.stats.residual)]);
    match sol.covariance_path() {
        Ok(path) => {
            let objective = cost_functional(p, &k, &path)?;
            tables.push((
                "covariance.csv",
                artifacts::covariance_csv(&grid, path.sigmas())?,
            ));
            Ok(RunOutcome {
                status: "converged".into(),
                exit: 0,
                steps: s.steps,
                tol: riccati::SHOOTING_TOL,
                iterations: sol.stats.iterations,
                residuals,
                objective: Some(objective),
                tables,
            })
        }
        Err(err) => {
            eprintln!("covariance reconstruction failed: {err}");
            Ok(RunOutcome {
                status: "singular_covariance".into(),
                exit: 2,
                steps: s.steps,
                tol: riccati::SHOOTING_TOL,
                iterations: sol.stats.iterations,
                residuals,
                objective: None,
                tables,
            })
        }
    }
}

fn run_pde(cfg: &RunConfig, p: &SteeringProblem, s: &Settings) -> Result<RunOutcome, CliError> {
    if p.n() != 1 || p.m() != 1 {
        return Err(invalid(
            "the grid solver handles scalar problems (n = m = 1); use steer-sdp or steer-riccati in higher dimension",
        ));
    }
    let pc = cfg.pde.as_ref().ok_or_else(|| {
        invalid("steer-pde needs a [pde] section with lower, upper, and nodes")
    })?;
    let mesh = Mesh::line(pc.lower, pc.upper, pc.nodes)?;
    let grid = TimeGrid::uniform(p.horizon, s.steps)?;
    let nodes = mesh.nodes();
    let a11 = p.a[(0, 0)];
    let b11 = p.b[(0, 0)];
    let drift = DMatrix::from_fn(nodes, 1, |i, _| a11 * mesh.coord(i)[0]);
    let channel = DMatrix::from_element(nodes, 1, b11);
    let killing = DVector::from_element(nodes, pc.killing);
    let gm = GridModel::new(
        mesh,
        grid.clone(),
        TimeField::Static(drift),
        TimeField::Static(channel),
        TimeField::Static(killing),
    )?;
    let rho0 = gaussian_field(gm.mesh(), p.sigma0[(0, 0)])?;
    let rho_t = gaussian_field(gm.mesh(), p.sigma_t[(0, 0)])?;

    let factors = match pde::fortet_iterate(&gm, &rho0, &rho_t, s.tol, s.max_iters) {
        Ok(f) => f,
        Err(PdeError::PositivityFloor { time_index }) => {
            // The iteration drove a factor to zero somewhere the target
            // marginal still has mass — a breakdown of the run, not of
            // the inputs.
            return Ok(RunOutcome {
                status: format!("positivity_floor_at_{time_index}"),
                exit: 2,
                steps: s.steps,
                tol: s.tol,
                iterations: 0,
                residuals: BTreeMap::new(),
                objective: None,
                tables: Vec::new(),
            });
        }
        Err(err) => return Err(err.into()),
    };

    let (mut status, mut exit) = if factors.converged {
        ("converged".to_string(), 0u8)
    } else {
        ("iteration_cap".to_string(), 2)
    };
    let mut residuals = BTreeMap::from([("fixed_point".to_string(), factors.residual)]);

    let u = pde::extract_control(&factors, &gm)?;
    let coords: Vec<f64> = (0..nodes).map(|i| gm.mesh().coord(i)[0]).collect();
    let u_slices: Vec<DVector<f64>> = u.iter().map(|m| m.column(0).into_owned()).collect();
    let mut tables = vec![(
        "control.csv",
        artifacts::profile_csv(&coords, &grid, &u_slices, "u")?,
    )];
    match pde::evolve_controlled(&gm, &rho0, &u) {
        Ok(evolved) => {
            residuals.insert(
                "terminal_l1".to_string(),
                rel_l1_gap(evolved.slice(grid.steps()), rho_t.slice(0)),
            );
            tables.push((
                "density.csv",
                artifacts::profile_csv(&coords, &grid, evolved.slices(), "rho")?,
            ));
        }
        Err(err) => {
            eprintln!("controlled evolution failed: {err}");
            if exit == 0 {
                status = "evolution_failed".into();
                exit = 2;
            }
        }
    }
    Ok(RunOutcome {
        status,
        exit,
        steps: s.steps,
        tol: s.tol,
        iterations: factors.iterations,
        residuals,
        objective: None,
        tables,
    })
}

fn run_simulate(p: &SteeringProblem, s: &Settings, args: &RunArgs) -> Result<RunOutcome, CliError> {
    let k = match &args.gains {
        Some(path) => {
            let bytes = fs::read(path).map_err(|source| CliError::Io {
                context: format!("cannot read {}", path.display()),
                source,
            })?;
            artifacts::parse_gains_csv(&bytes, p.horizon, p.n(), p.m())?
        }
        None => GainSchedule::zero(TimeGrid::uniform(p.horizon, s.steps)?, p.n(), p.m()),
    };
    let threads = thread_budget()?;
    let trajs = sim::sample_paths_detailed(p, &k, s.paths, s.seed, s.substeps, threads)?;
    let (cost, cost_stderr) = sim::estimate_cost(&trajs, &k, &p.s)?;

    let mut tables = vec![("paths.csv", artifacts::paths_csv(&trajs))];
    if trajs.len() >= 2 {
        let grid = k.grid();
        let sigmas = (0..grid.len())
            .map(|j| sim::empirical_covariance(&trajs, j))
            .collect::<Result<Vec<_>, _>>()?;
        tables.push(("covariance.csv", artifacts::covariance_csv(grid, &sigmas)?));
    }
    Ok(RunOutcome {
        status: "converged".into(),
        exit: 0,
        steps: k.grid().steps(),
        tol: s.tol,
        iterations: 0,
        residuals: BTreeMap::from([("cost_stderr".to_string(), cost_stderr)]),
        objective: Some(cost),
        tables,
    })
}

fn validate(args: &RunArgs) -> Result<ExitCode, CliError> {
    let (cfg, _) = RunConfig::load(&args.config)?;
    let p = cfg.problem()?;
    println!(
        "config: ok (n = {}, m = {}, horizon = {})",
        p.n(),
        p.m(),
        p.horizon
    );
    if let Some(name) = cfg.method.name {
        println!("declared method: {}", name.as_str());
    }
    let report = validate_problem(&p)?;
    let mut all = true;
    for check in &report.checks {
        let verdict = if check.passed { "pass" } else { "FAIL" };
        println!("{}: {} ({})", check.name, verdict, check.detail);
        all &= check.passed;
    }
    if all {
        println!("problem: ok");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("problem validation failed");
        Ok(ExitCode::from(1))
    }
}

/// Sampling thread count: `STEER_THREADS` when set, otherwise the machine's
/// parallelism capped at 8. Results do not depend on the choice.
fn thread_budget() -> Result<usize, CliError> {
    match std::env::var("STEER_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v),
            _ => Err(invalid(format!(
                "STEER_THREADS must be a positive integer, got {raw:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|v| v.get())
            .unwrap_or(1)
            .min(8)),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(invalid("STEER_THREADS is not valid unicode"))
        }
    }
}

/// Normalized density from the scalar problem's covariance entry, so the
/// grid run shares its marginals with the matrix solvers.
fn gaussian_field(mesh: &Mesh, variance: f64) -> Result<Field, CliError> {
    if !(variance.is_finite() && variance > 0.0) {
        return Err(invalid(format!(
            "marginal variance must be positive, got {variance}"
        )));
    }
    let mut values = DVector::from_fn(mesh.nodes(), |i, _| {
        let x = mesh.coord(i)[0];
        (-x * x / (2.0 * variance)).exp()
    });
    let mass = values.sum() * mesh.cell_volume();
    values /= mass;
    Ok(Field::initial(FieldKind::Density, values)?)
}

/// `sum |a - b| / sum |b|` — the same relative-mass gap the fixed point
/// reports, reused to grade the controlled density against its target.
fn rel_l1_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    let den: f64 = b.iter().map(|v| v.abs()).sum();
    num / den.max(f64::MIN_POSITIVE)
}
