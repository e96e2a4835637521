//! Command-line front end: bound an event probability or an average
//! effect, cross-check small instances against the exhaustive oracle,
//! certify tightness of a candidate optimizer, validate instance files,
//! and emit synthetic instances with known ground truth.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use proxybound::ace::{self, AceError};
use proxybound::consts::{DEFAULT_DELTA, DEFAULT_MAX_ITER, DEFAULT_RESTARTS};
use proxybound::engine::{self, BoundDirection, BoundResult, EngineError, EngineOptions};
use proxybound::model::{self, PhiVector, ProblemSpec};
use proxybound::tightness;

#[derive(Parser)]
#[command(
    name = "proxybound",
    about = "Certified bounds on interventional probabilities under a partially identified proxy transition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bound the target event probability f(y | do(x)).
    Bound(RunArgs),
    /// Bound the average causal effect under the instance's outcome values.
    Ace(RunArgs),
    /// Exhaustive grid oracle for two-confounder instances.
    Oracle(OracleArgs),
    /// Search for a joint witness certifying that a bound is attained.
    #[command(name = "check-tightness")]
    CheckTightness(TightnessArgs),
    /// Load an instance file and report whether it is well formed.
    Validate(ValidateArgs),
    /// Draw a synthetic instance with known ground truth and write it out.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Lower,
    Upper,
}

impl From<DirectionArg> for BoundDirection {
    fn from(d: DirectionArg) -> BoundDirection {
        match d {
            DirectionArg::Lower => BoundDirection::Lower,
            DirectionArg::Upper => BoundDirection::Upper,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Instance JSON file.
    #[arg(long)]
    input: PathBuf,
    /// Which side of the partially identified set to certify.
    #[arg(long, value_enum, default_value = "lower")]
    direction: DirectionArg,
    /// Stop once the certified error is at or below this.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Iteration budget for the branch-and-bound loop.
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: u64,
    /// Write the per-iteration trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the run summary as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed for any randomized component of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable incumbent pruning (bounds are unchanged, work is not).
    #[arg(long)]
    no_prune: bool,
    /// Worker threads for bounding child nodes.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct OracleArgs {
    /// Instance JSON file.
    #[arg(long)]
    input: PathBuf,
    /// Grid step over the free parameters (at least 1e-4).
    #[arg(long, default_value_t = 1e-3)]
    grid: f64,
    /// Write the oracle result as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TightnessArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ValidateArgs {
    /// Instance JSON file.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Where to write the generated instance JSON.
    #[arg(long)]
    output: PathBuf,
    /// Seed for the generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems are validation failures, not tool crashes.
            let _ = err.print();
            std::process::exit(if err.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// Exit codes: 1 for anything wrong with the request or instance, 2 for
/// numerical failure inside the solver, 3 for a provably empty feasible
/// region.
fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<EngineError>() {
        return engine_exit_code(e);
    }
    if let Some(e) = err.downcast_ref::<AceError>() {
        return match e {
            AceError::Engine(inner) => engine_exit_code(inner),
            _ => 1,
        };
    }
    1
}

fn engine_exit_code(e: &EngineError) -> i32 {
    match e {
        EngineError::EmptyFeasibleRegion => 3,
        EngineError::Numerical(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Bound(args) => run_bound(&args, Mode::Event),
        Command::Ace(args) => run_bound(&args, Mode::Effect),
        Command::Oracle(args) => run_oracle(&args),
        Command::CheckTightness(args) => run_tightness(&args),
        Command::Validate(args) => run_validate(&args),
        Command::Simulate(args) => run_simulate(&args),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Event,
    Effect,
}

fn load_spec(path: &Path) -> anyhow::Result<ProblemSpec> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let spec = model::load_problem(file)
        .with_context(|| format!("invalid instance {}", path.display()))?;
    Ok(spec)
}

fn check_run_invariants(args: &RunArgs) -> anyhow::Result<()> {
    if !(args.delta.is_finite() && args.delta > 0.0) {
        anyhow::bail!("--delta must be a positive finite number");
    }
    if args.max_iter < 1 {
        anyhow::bail!("--max-iter must be at least 1");
    }
    Ok(())
}

fn engine_options(args: &RunArgs) -> EngineOptions {
    EngineOptions {
        direction: args.direction.into(),
        tol_delta: args.delta,
        max_iter: args.max_iter,
        prune: !args.no_prune,
        threads: args.threads.max(1),
        ..EngineOptions::default()
    }
}

fn config_json(args: &RunArgs, mode: &str) -> serde_json::Value {
    serde_json::json!({
        "subcommand": mode,
        "input": args.input.display().to_string(),
        "direction": BoundDirection::from(args.direction).as_str(),
        "delta": args.delta,
        "max_iter": args.max_iter,
        "seed": args.seed,
        "prune": !args.no_prune,
        "threads": args.threads.max(1),
    })
}

/// Run the engine, treating an exhausted iteration budget as a reportable
/// outcome rather than a failure.
fn solve(spec: &ProblemSpec, args: &RunArgs, mode: Mode) -> anyhow::Result<(BoundResult, bool)> {
    let opts = engine_options(args);
    let outcome = match mode {
        Mode::Event => engine::run(spec, &opts).map_err(anyhow::Error::new),
        Mode::Effect => ace::bound_ace_default(spec, &opts).map_err(anyhow::Error::new),
    };
    match outcome {
        Ok(result) => Ok((result, true)),
        Err(err) => {
            let budget = err
                .downcast_ref::<EngineError>()
                .and_then(max_iter_result)
                .or_else(|| match err.downcast_ref::<AceError>() {
                    Some(AceError::Engine(inner)) => max_iter_result(inner),
                    _ => None,
                });
            match budget {
                Some(result) => Ok((result, false)),
                None => Err(err),
            }
        }
    }
}

fn max_iter_result(e: &EngineError) -> Option<BoundResult> {
    match e {
        EngineError::MaxIterReached(boxed) => Some((**boxed).clone()),
        _ => None,
    }
}

fn result_json(result: &BoundResult, converged: bool) -> serde_json::Value {
    serde_json::json!({
        "direction": result.direction.as_str(),
        "bound": result.bound,
        "geometric_factor": result.geometric_factor,
        "certified_error": result.certified_error,
        "iterations": result.iterations,
        "l_n": result.l_n,
        "converged": converged,
        "incumbent": result.incumbent.as_ref().map(|inc| {
            serde_json::json!({ "value": inc.value, "blocks": inc.blocks })
        }),
    })
}

fn print_result(result: &BoundResult, converged: bool) {
    println!("bound={:.12}", result.bound);
    println!("certified_error={:.6e}", result.certified_error);
    println!("geometric_factor={:.6e}", result.geometric_factor);
    println!("l_n={}", result.l_n);
    println!("iterations={}", result.iterations);
    println!("converged={converged}");
    if let Some(inc) = &result.incumbent {
        println!("incumbent={:.12}", inc.value);
    }
}

fn write_trace(result: &BoundResult, path: &Path) -> anyhow::Result<()> {
    let mut file =
        File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    engine::write_trace_csv(&result.trace, &mut file)?;
    Ok(())
}

fn write_json(path: &Path, doc: &serde_json::Value) -> anyhow::Result<()> {
    let mut file =
        File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    serde_json::to_writer_pretty(&mut file, doc)?;
    file.write_all(b"\n")?;
    Ok(())
}

fn run_bound(args: &RunArgs, mode: Mode) -> anyhow::Result<()> {
    check_run_invariants(args)?;
    let spec = load_spec(&args.input)?;
    let (result, converged) = solve(&spec, args, mode)?;
    print_result(&result, converged);
    if let Some(path) = &args.trace {
        write_trace(&result, path)?;
    }
    if let Some(path) = &args.output {
        let mode_name = if mode == Mode::Event { "bound" } else { "ace" };
        let doc = serde_json::json!({
            "seed": args.seed,
            "config": config_json(args, mode_name),
            "result": result_json(&result, converged),
        });
        write_json(path, &doc)?;
    }
    Ok(())
}

fn run_oracle(args: &OracleArgs) -> anyhow::Result<()> {
    if !(args.grid.is_finite() && args.grid >= 1e-4) {
        anyhow::bail!("--grid must be a finite step of at least 1e-4");
    }
    let spec = load_spec(&args.input)?;
    let value = engine::brute_force_min(&spec, args.grid)?;
    let error_bound = 2.0 * args.grid;
    println!("oracle={value:.6} \u{b1} {error_bound:.1e}");
    if let Some(path) = &args.output {
        let doc = serde_json::json!({
            "config": {
                "subcommand": "oracle",
                "input": args.input.display().to_string(),
                "grid": args.grid,
            },
            "oracle": value,
            "error_bound": error_bound,
        });
        write_json(path, &doc)?;
    }
    Ok(())
}

fn run_tightness(args: &TightnessArgs) -> anyhow::Result<()> {
    check_run_invariants(&args.run)?;
    let spec = load_spec(&args.run.input)?;
    let phi: PhiVector = match &spec.phi {
        Some(phi) => phi.clone(),
        None => {
            let (result, converged) = solve(&spec, &args.run, Mode::Event)?;
            print_result(&result, converged);
            if let Some(path) = &args.run.trace {
                write_trace(&result, path)?;
            }
            match result.incumbent {
                Some(inc) => inc.blocks.into_iter().next().expect("event runs carry one block"),
                None => anyhow::bail!(
                    "no feasible incumbent to certify; embed a phi in the instance instead"
                ),
            }
        }
    };
    let witness = tightness::find_witness_seeded(&phi, &spec, DEFAULT_RESTARTS, args.run.seed);
    match witness {
        Some(witness) => {
            println!("tight-certified: true");
            if let Some(path) = &args.run.output {
                let doc = serde_json::json!({
                    "seed": args.run.seed,
                    "config": config_json(&args.run, "check-tightness"),
                    "phi": phi,
                    "witness": witness,
                });
                write_json(path, &doc)?;
                println!("witness={}", path.display());
            }
        }
        None => {
            // One-sided certificate: absence only means "not proven tight".
            println!("tight-certified: false");
        }
    }
    Ok(())
}

fn run_validate(args: &ValidateArgs) -> anyhow::Result<()> {
    let file = File::open(&args.input)
        .with_context(|| format!("cannot open {}", args.input.display()))?;
    match model::load_problem(file) {
        Ok(spec) => {
            println!("valid");
            println!("confounders={}", spec.d());
            println!("proxies={}", spec.n_w());
            println!("treatments={}", spec.n_x());
            println!("target_x={}", spec.target_x);
            println!("event_mass={:.6}", spec.f_yx());
            Ok(())
        }
        Err(err) => Err(anyhow::Error::new(err).context("instance rejected")),
    }
}

fn run_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let sim = model::simulate_seeded(args.seed, (2, 2, 2), 0.1);
    let mut doc = serde_json::to_value(&sim.spec)?;
    doc["seed"] = serde_json::json!(args.seed);
    doc["config"] = serde_json::json!({
        "subcommand": "simulate",
        "dims": { "u": 2, "w": 2, "x": 2 },
        "widening": 0.1,
        "seed": args.seed,
    });
    doc["truth"] = serde_json::json!(sim.truth);
    doc["latent"] = serde_json::json!({
        "joint": sim.joint,
        "transition": sim.transition,
    });
    write_json(&args.output, &doc)?;
    println!("truth={:.12}", sim.truth);
    println!("written={}", args.output.display());
    Ok(())
}
