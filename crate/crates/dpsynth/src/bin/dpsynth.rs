//! Command-line front door: synth, infer, simulate and report subcommands.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime or data error.
//! stdout carries machine-readable output only; diagnostics go to stderr.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dpsynth::combine::{combine, VarianceRule};
use dpsynth::dp::{BudgetLedger, PrivacyBudget};
use dpsynth::error::Error;
use dpsynth::estimators::Estimand;
use dpsynth::randkit::RngStream;
use dpsynth::simlab::{run_experiment, write_report, ExperimentConfig};
use dpsynth::synth::{generate_m_datasets, write_bundle, SynthMethod, SynthesisRequest};
use dpsynth::tabular::{load_csv, Schema};

#[derive(Parser)]
#[command(name = "dpsynth", version, about = "Differentially private synthetic data with combining-rule inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate m synthetic copies of a CSV dataset
    Synth(SynthArgs),
    /// Combine per-copy estimates from m synthetic CSVs into one inference
    Infer(InferArgs),
    /// Run a Monte Carlo coverage experiment from a TOML config
    Simulate(SimulateArgs),
    /// Re-emit report tables from a previously written metrics.json
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Original dataset CSV
    #[arg(long)]
    input: PathBuf,
    /// Schema JSON describing the columns
    #[arg(long)]
    schema: PathBuf,
    /// histogram | bayesnet | gaussian | gaussian-ppd
    #[arg(long)]
    method: SynthMethod,
    /// Total privacy budget, a decimal or "inf"
    #[arg(long, value_parser = parse_eps)]
    epsilon: f64,
    /// Number of synthetic copies
    #[arg(long)]
    m: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Equal-width bins per continuous column
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Maximum parents per node for the bayesnet method
    #[arg(long, default_value_t = 1)]
    degree: usize,
    /// Rows per synthetic copy; defaults to the original n
    #[arg(long)]
    out_n: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// The m synthetic CSVs
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Schema JSON describing the columns
    #[arg(long)]
    schema: PathBuf,
    /// e.g. "mean:y1", "prop:y1=1", "ols:y1~y2+y3#y2"
    #[arg(long)]
    estimand: Estimand,
    /// tp | ts | tsppd | naive
    #[arg(long)]
    rule: VarianceRule,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config TOML
    #[arg(long)]
    config: PathBuf,
    /// Overrides out_dir from the config
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; affects wall time only, never outputs
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing metrics.json from a previous simulate run
    #[arg(long)]
    dir: PathBuf,
}

fn parse_eps(s: &str) -> Result<f64, String> {
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("epsilon must be > 0 or \"inf\"".to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, Error> {
    if args.m == 0 {
        return Ok(usage_error("--m must be >= 1"));
    }
    if args.bins < 2 {
        return Ok(usage_error("--bins must be >= 2"));
    }
    let schema = Schema::from_json_file(&args.schema)?;
    let report = load_csv(&args.input, &schema)?;
    let clamped: usize = report.clamp_counts.iter().sum();
    if clamped > 0 {
        eprintln!("note: clamped {clamped} out-of-range continuous cells to the schema range");
    }
    let budget = if args.epsilon.is_infinite() {
        PrivacyBudget::non_private()
    } else {
        PrivacyBudget::pure(args.epsilon)?
    };
    let mut req = SynthesisRequest::new(args.method, budget, args.m);
    req.bins_per_continuous = args.bins;
    req.bn_degree = args.degree;
    req.out_n = args.out_n;
    if let Err(e) = req.validate() {
        return Ok(usage_error(&e.to_string()));
    }
    let mut ledger = BudgetLedger::new(budget);
    let stream = RngStream::new(args.seed, 0);
    let bundle = generate_m_datasets(&report.dataset, &req, &stream, &mut ledger)?;
    write_bundle(&args.out_dir, &bundle, args.seed, &ledger)?;
    eprintln!(
        "wrote {} synthetic copies to {} (ledger epsilon spend {})",
        args.m,
        args.out_dir.display(),
        dpsynth::simlab::format_eps(ledger.spent().epsilon)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode, Error> {
    if args.inputs.len() < 2 && args.rule == VarianceRule::Tp {
        return Ok(usage_error(
            "rule tp needs m >= 2 synthetic copies to estimate the between variance",
        ));
    }
    if !(0.0 < args.level && args.level < 1.0) {
        return Ok(usage_error("--level must be in (0, 1)"));
    }
    let schema = Schema::from_json_file(&args.schema)?;
    let mut qs = Vec::with_capacity(args.inputs.len());
    let mut us = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let report = load_csv(path, &schema)?;
        let est = args.estimand.evaluate(&report.dataset)?;
        qs.push(est.q);
        us.push(est.u);
    }
    let mut inference = combine(&qs, &us, args.rule, args.level)?;
    inference.estimand = Some(args.estimand.to_string());
    println!("{}", serde_json::to_string_pretty(&inference)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let cfg = match ExperimentConfig::from_toml_file(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => return Ok(usage_error(&e.to_string())),
    };
    let out_dir = match args.out_dir.clone().or_else(|| cfg.out_dir.clone()) {
        Some(d) => d,
        None => return Ok(usage_error("no out_dir in config and no --out-dir flag")),
    };
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Ok(usage_error("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let start = Instant::now();
    let out = run_experiment(&cfg)?;
    write_report(&out, &cfg, &out_dir)?;
    eprintln!(
        "simulate: {} cells in {:.1}s, reports in {}",
        out.table.cells.len(),
        start.elapsed().as_secs_f64(),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode, Error> {
    let path = args.dir.join("metrics.json");
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&body)?;
    let cells = value["cells"]
        .as_array()
        .ok_or_else(|| Error::Parse("metrics.json has no cells array".into()))?;
    // compact per-cell summary to stdout, one JSON object per line
    for c in cells {
        println!("{}", serde_json::to_string(c)?);
    }
    eprintln!("report: {} cells from {}", cells.len(), path.display());
    Ok(ExitCode::SUCCESS)
}
