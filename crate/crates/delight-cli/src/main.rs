//! Command-line interface for the delight crate.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! verification failures (gradient tolerance breaches and unmet sweep
//! constraints).

mod ablate;
mod analyze;
mod config;
mod run;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{ReportFormat, RunConfig};
use delight::error::{Error, Result};
use delight::gradcheck::{check_component, COMPONENTS, DEFAULT_TOLERANCE};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "delight",
    version,
    about = "Deep and light-weight transformers: cost analysis, toy training, \
             evaluation, gradient checks, and ablation sweeps."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report the block plan, per-layer shapes, parameters, and MACs.
    Analyze(AnalyzeArgs),
    /// Train on a toy task, writing metrics, checkpoint, and eval report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its task.
    Eval(EvalArgs),
    /// Verify gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a directional ablation sweep.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run configuration JSON.
    config: PathBuf,
    /// Source token count priced into the MAC columns.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Target token count priced into the MAC columns.
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Output format; defaults to the config's report section.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON.
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "DELIGHT_SEED")]
    seed: Option<u64>,
    /// Overrides the config step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory; defaults to the config's report.out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    checkpoint: PathBuf,
    /// Run configuration providing the task section; defaults match the
    /// checkpoint's task kind.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the held-out evaluation stream.
    #[arg(long, env = "DELIGHT_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Component name, or `all` for the full suite.
    #[arg(long, default_value = "all")]
    component: String,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 8)]
    coords: usize,
    #[arg(long, env = "DELIGHT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Shuffle,
    R,
    Scaling,
}

#[derive(Args)]
struct AblateArgs {
    /// Run configuration JSON for the base variant.
    config: PathBuf,
    /// Sweep axis.
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Overrides the config step count for every variant.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the config seed for every variant.
    #[arg(long, env = "DELIGHT_SEED")]
    seed: Option<u64>,
    /// Write the comparison table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let resolved = cfg.resolve()?;
    let report = analyze::analyze(&resolved.model, a.n, a.m)?;
    let format = match a.format {
        Some(FormatArg::Csv) => ReportFormat::Csv,
        Some(FormatArg::Json) => ReportFormat::Json,
        None => cfg.report.format,
    };
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json()?,
    };
    emit(a.out.as_deref(), &text)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(out) = a.out {
        cfg.report.out = Some(out);
    }
    let resolved = cfg.resolve()?;
    let outcome = run::run_training(&resolved, cfg.report.out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let outcome = run::run_eval(&a.checkpoint, a.config.as_deref(), a.seed)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let components: Vec<&str> = if a.component == "all" {
        COMPONENTS.to_vec()
    } else {
        vec![a.component.as_str()]
    };
    let mut failed = false;
    for component in components {
        let report = check_component(component, a.coords, a.tol, a.seed)?;
        println!("{}", report.summary_line());
        failed |= !report.passed();
    }
    if failed {
        return Err(Error::Verification("gradient check tolerance exceeded".into()));
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    let axis = match a.axis {
        AxisArg::Shuffle => ablate::Axis::Shuffle,
        AxisArg::R => ablate::Axis::R,
        AxisArg::Scaling => ablate::Axis::Scaling,
    };
    let table = ablate::ablate(&cfg, axis)?;
    let text = match cfg.report.format {
        ReportFormat::Csv => table.to_csv(),
        ReportFormat::Json => table.to_json()?,
    };
    emit(a.out.as_deref(), &text)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Verification(msg)) => {
            eprintln!("verification failure: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
