//! Command-line front end: load a problem instance, solve the interconnected
//! system, cross-check against the dynamic-programming oracle, simulate
//! paths, evaluate strategies, and run the embedded selftest.
//!
//! Exit codes: `0` success, `1` usage or I/O, `2` instance parsing or
//! validation failure (the report goes to stderr as JSON), `3` solver
//! non-convergence. Stochastic commands require an explicit `--seed`; given
//! identical inputs and flags, outputs are byte-identical across runs.

mod schema;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use markswitch::lattice::ChainGrid;
use markswitch::mpp;
use markswitch::oracle::{self, Action};
use markswitch::problem::{
    estimate_reward, validate_problem, EstimateMethod, McConfig, SwitchingProblem,
};
use markswitch::switching::{self, SwitchingError};

use schema::{ProblemFile, StrategyFile, SCHEMA_VERSION};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "markswitch", version, about = "Optimal switching of jump intensities: solvers, oracles, simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Reweighted,
    Direct,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the interconnected system; emit the value surface as CSV and the
    /// iteration report as JSON.
    Solve {
        file: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Defaults to n_steps * n_modes.
        #[arg(long)]
        max_iter: Option<usize>,
        /// CSV destination; with it the report goes to stdout, without it the
        /// CSV goes to stdout and the report to stderr.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dynamic-programming oracle values as CSV.
    Oracle {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate marked point process paths under the reference law.
    Simulate {
        file: PathBuf,
        #[arg(long)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimate of a fixed strategy's expected reward.
    Evaluate {
        file: PathBuf,
        #[arg(long)]
        strategy_file: PathBuf,
        #[arg(long)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MethodArg::Reweighted)]
        method: MethodArg,
        /// Path-grid resolution; defaults to the instance's n_steps.
        #[arg(long)]
        quad_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve, extract strategies, and verify the value by Monte Carlo against
    /// random strategies and the oracle.
    Verify {
        file: PathBuf,
        #[arg(long)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the embedded checks on bundled instances.
    Selftest,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful terminations.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve { file, tol, max_iter, out } => cmd_solve(&file, tol, max_iter, out),
        Command::Oracle { file, out } => cmd_oracle(&file, out),
        Command::Simulate { file, paths, seed, out } => cmd_simulate(&file, paths, seed, out),
        Command::Evaluate { file, strategy_file, paths, seed, method, quad_steps, out } => {
            cmd_evaluate(&file, &strategy_file, paths, seed, method, quad_steps, out)
        }
        Command::Verify { file, paths, seed, out } => cmd_verify(&file, paths, seed, out),
        Command::Selftest => cmd_selftest(),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn write_output(out: Option<&PathBuf>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Loads, builds, and validates an instance against its chain.
fn load(path: &Path) -> Result<(ProblemFile, SwitchingProblem, ChainGrid), Failure> {
    let text = read_file(path)?;
    let file = ProblemFile::parse(&text)
        .map_err(|e| Failure::validation(json_error(&format!("{e:#}"))))?;
    let problem =
        file.build().map_err(|e| Failure::validation(json_error(&format!("{e:#}"))))?;
    let grid = ChainGrid::build(&problem, file.n_steps)
        .map_err(|e| Failure::validation(json_error(&e.to_string())))?;
    let report = validate_problem(&problem, &grid);
    if !report.is_valid() {
        let payload = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "validation": report,
        });
        return Err(Failure::validation(serde_json::to_string_pretty(&payload).unwrap()));
    }
    Ok((file, problem, grid))
}

fn json_error(message: &str) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "error": message,
    }))
    .unwrap()
}

fn to_pretty<T: Serialize>(envelope_key: &str, value: &T) -> String {
    let mut payload = serde_json::Map::new();
    payload.insert("schema_version".into(), serde_json::json!(SCHEMA_VERSION));
    payload.insert(envelope_key.into(), serde_json::to_value(value).unwrap());
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(payload)).unwrap();
    text.push('\n');
    text
}

fn cmd_solve(
    path: &Path,
    tol: f64,
    max_iter: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let (file, problem, grid) = load(path)?;
    let max_iter = max_iter.unwrap_or(file.n_steps * problem.n_modes());
    let (system, report) = match switching::picard_solve(&grid, &problem, tol, max_iter) {
        Ok(pair) => pair,
        Err(SwitchingError::NonConvergence { report, .. }) => {
            return Err(Failure {
                code: EXIT_NONCONVERGENCE,
                message: to_pretty("picard", &report),
            });
        }
        Err(e) => return Err(Failure::validation(json_error(&e.to_string()))),
    };

    let mut csv = String::new();
    writeln!(csv, "# schema_version={SCHEMA_VERSION}").unwrap();
    writeln!(csv, "k,w,n,mode,y,dK").unwrap();
    for k in 0..=grid.n_steps() {
        for node in grid.nodes_at(k) {
            for mode in 0..problem.n_modes() {
                writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    k,
                    node.w,
                    node.n,
                    mode,
                    system.y(&grid, node, mode),
                    system.mode(mode).k_increment(&grid, node)
                )
                .unwrap();
            }
        }
    }

    let report_json = to_pretty("picard", &report);
    match out {
        Some(path) => {
            write_output(Some(&path), &csv)?;
            print!("{report_json}");
        }
        None => {
            print!("{csv}");
            eprint!("{report_json}");
        }
    }
    Ok(())
}

fn cmd_oracle(path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let (_, problem, grid) = load(path)?;
    let table = oracle::dp_value(&grid, &problem)
        .map_err(|e| Failure::validation(json_error(&e.to_string())))?;

    let mut csv = String::new();
    writeln!(csv, "# schema_version={SCHEMA_VERSION}").unwrap();
    writeln!(csv, "k,w,n,mode,v,action").unwrap();
    for k in 0..=grid.n_steps() {
        for node in grid.nodes_at(k) {
            for mode in 0..problem.n_modes() {
                let action = match table.action(&grid, node, mode) {
                    Action::Continue => "continue".to_string(),
                    Action::SwitchTo(j) => format!("switch:{j}"),
                };
                writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    k,
                    node.w,
                    node.n,
                    mode,
                    table.value(&grid, node, mode),
                    action
                )
                .unwrap();
            }
        }
    }
    write_output(out.as_ref(), &csv)
}

fn cmd_simulate(
    path: &Path,
    paths: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    if paths == 0 {
        return Err(Failure::usage("--paths must be at least 1".to_string()));
    }
    let (_, problem, _) = load(path)?;
    let mut csv = String::new();
    writeln!(csv, "# schema_version={SCHEMA_VERSION}").unwrap();
    writeln!(csv, "path,event,time,mark,label").unwrap();
    for i in 0..paths as u64 {
        let sample = mpp::simulate_path_indexed(&problem.compensator, problem.horizon, seed, i)
            .map_err(|e| Failure::validation(json_error(&e.to_string())))?;
        for (event, &(t, mark)) in sample.events().iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{},{}",
                i,
                event,
                t,
                mark,
                problem.compensator.mark_labels()[mark]
            )
            .unwrap();
        }
    }
    write_output(out.as_ref(), &csv)
}

#[derive(Serialize)]
struct EvaluateOutput {
    mean: f64,
    stderr: f64,
    method: String,
    n_paths: usize,
    seed: u64,
    quad_steps: usize,
    warnings: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    path: &Path,
    strategy_path: &Path,
    paths: usize,
    seed: u64,
    method: MethodArg,
    quad_steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    if paths < 2 {
        return Err(Failure::usage("--paths must be at least 2".to_string()));
    }
    let (file, problem, _) = load(path)?;
    let strategy_text = read_file(strategy_path)?;
    let strategy_file = StrategyFile::parse(&strategy_text)
        .map_err(|e| Failure::validation(json_error(&format!("{e:#}"))))?;
    let (strategy, warnings) = strategy_file
        .build(problem.n_modes(), problem.horizon, file.n_steps)
        .map_err(|e| Failure::validation(json_error(&format!("{e:#}"))))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let cfg = McConfig {
        n_paths: paths,
        seed,
        method: match method {
            MethodArg::Reweighted => EstimateMethod::Reweighted,
            MethodArg::Direct => EstimateMethod::Direct,
        },
        quad_steps: quad_steps.unwrap_or(file.n_steps),
    };
    let estimate = estimate_reward(&problem, &strategy, &cfg)
        .map_err(|e| Failure::validation(json_error(&e.to_string())))?;
    let output = EvaluateOutput {
        mean: estimate.mean,
        stderr: estimate.stderr,
        method: format!("{method:?}").to_lowercase(),
        n_paths: paths,
        seed,
        quad_steps: cfg.quad_steps,
        warnings,
    };
    write_output(out.as_ref(), &to_pretty("estimate", &output))
}

fn cmd_verify(path: &Path, paths: usize, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    if paths < 2 {
        return Err(Failure::usage("--paths must be at least 2".to_string()));
    }
    let (file, problem, grid) = load(path)?;
    let max_iter = file.n_steps * problem.n_modes();
    let (system, _) = match switching::picard_solve(&grid, &problem, 1e-10, max_iter) {
        Ok(pair) => pair,
        Err(SwitchingError::NonConvergence { report, .. }) => {
            return Err(Failure {
                code: EXIT_NONCONVERGENCE,
                message: to_pretty("picard", &report),
            });
        }
        Err(e) => return Err(Failure::validation(json_error(&e.to_string()))),
    };
    let report = switching::verify_representation(&system, &grid, &problem, paths, seed)
        .map_err(|e| Failure::validation(json_error(&e.to_string())))?;
    write_output(out.as_ref(), &to_pretty("verification", &report))
}

fn cmd_selftest() -> Result<(), Failure> {
    use markswitch::instances;

    type Check = Box<dyn Fn() -> Result<(), String>>;
    let checks: Vec<(&str, Check)> = vec![
        (
            "zero intensity produces no events",
            Box::new(|| {
                let comp = mpp::CompensatorSpec::constant_single_mark(0.0);
                for seed in 0..10 {
                    let path = mpp::simulate_path(&comp, 1.0, seed).map_err(|e| e.to_string())?;
                    if path.n_events() != 0 {
                        return Err(format!("seed {seed}: {} events", path.n_events()));
                    }
                }
                Ok(())
            }),
        ),
        (
            "identity kernel weight is exactly one",
            Box::new(|| {
                let comp = mpp::CompensatorSpec::constant_single_mark(2.0);
                let kernel = mpp::KernelField::constant(1.0);
                let quad = mpp::QuadratureGrid::new(32, 1.0);
                for seed in 0..10 {
                    let path = mpp::simulate_path(&comp, 1.0, seed).map_err(|e| e.to_string())?;
                    let w = mpp::doleans_exponential(&path, &comp, &kernel, 1.0, quad)
                        .map_err(|e| e.to_string())?;
                    if w != 1.0 {
                        return Err(format!("weight {w}"));
                    }
                }
                Ok(())
            }),
        ),
        (
            "identical modes never switch",
            Box::new(|| {
                let (p, _) = instances::instance_sym();
                let grid = ChainGrid::build(&p, 10).map_err(|e| e.to_string())?;
                let (system, _) = switching::picard_solve(&grid, &p, 1e-10, 20)
                    .map_err(|e| e.to_string())?;
                for k in 0..=10 {
                    for node in grid.nodes_at(k) {
                        if system.y(&grid, node, 0) != system.y(&grid, node, 1) {
                            return Err(format!("asymmetry at {node:?}"));
                        }
                    }
                }
                Ok(())
            }),
        ),
        (
            "solver matches the oracle on the crossing-gains instance",
            Box::new(|| {
                let (p, _) = instances::instance_a();
                let grid = ChainGrid::build(&p, 10).map_err(|e| e.to_string())?;
                let (system, _) = switching::picard_solve(&grid, &p, 1e-10, 20)
                    .map_err(|e| e.to_string())?;
                let dp = oracle::dp_value(&grid, &p).map_err(|e| e.to_string())?;
                for mode in 0..p.n_modes() {
                    for k in 0..=10 {
                        for node in grid.nodes_at(k) {
                            let gap =
                                (system.y(&grid, node, mode) - dp.value(&grid, node, mode)).abs();
                            if gap > 1e-9 {
                                return Err(format!("gap {gap} at {node:?} mode {mode}"));
                            }
                        }
                    }
                }
                Ok(())
            }),
        ),
        (
            "validator flags a nonzero self-switch cost",
            Box::new(|| {
                let (mut p, _) = instances::instance_a();
                p.costs = markswitch::problem::CostStructure::new(|_, i, j| {
                    if i == j {
                        1.0
                    } else {
                        0.1
                    }
                });
                let grid = ChainGrid::build(&p, 10).map_err(|e| e.to_string())?;
                let report = validate_problem(&p, &grid);
                if report.is_valid() {
                    return Err("violation not detected".into());
                }
                Ok(())
            }),
        ),
        (
            "degenerate payoff estimates exactly",
            Box::new(|| {
                let (mut p, _) = instances::instance_sym();
                for m in &mut p.modes {
                    m.terminal = markswitch::problem::constant_fn(2.0);
                    m.running_f = markswitch::problem::constant_fn(0.0);
                    m.running_g = markswitch::problem::constant_fn(0.0);
                }
                let est = estimate_reward(
                    &p,
                    &markswitch::problem::Strategy::stay((0.0, 0)),
                    &McConfig {
                        n_paths: 200,
                        seed: 1,
                        method: EstimateMethod::Direct,
                        quad_steps: 16,
                    },
                )
                .map_err(|e| e.to_string())?;
                if est.mean != 2.0 || est.stderr != 0.0 {
                    return Err(format!("mean {} stderr {}", est.mean, est.stderr));
                }
                Ok(())
            }),
        ),
        (
            "dominant mode triggers an immediate switch",
            Box::new(|| {
                let (p, n) = instances::instance_dominant_mode();
                let grid = ChainGrid::build(&p, n).map_err(|e| e.to_string())?;
                let (system, _) = switching::picard_solve(&grid, &p, 1e-10, 2 * n)
                    .map_err(|e| e.to_string())?;
                let path = switching::sample_lattice_path(&grid, 1, 0).map_err(|e| e.to_string())?;
                let s = switching::extract_strategy(&system, &grid, &p, &path, (0.0, 0))
                    .map_err(|e| e.to_string())?;
                if s.switches() != [(0.0, 1)] {
                    return Err(format!("unexpected switches {:?}", s.switches()));
                }
                Ok(())
            }),
        ),
    ];

    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok - {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAILED - {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        return Err(Failure::usage(format!("selftest: {failed} check(s) failed")));
    }
    println!("selftest: all checks passed");
    Ok(())
}
