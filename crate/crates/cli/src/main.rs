//! `dpl`: run multi-fidelity HPO experiments on tabular learning-curve benchmarks.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpl_core::benchmark::{generate_synthetic, BenchmarkTable};
use dpl_core::forecast::{run_forecast_experiment, ForecastModel};
use dpl_core::hpo::Method;
use dpl_core::trajectory::RunSettings;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

mod report;

use report::{report_dir, trajectory_rows, write_trajectory};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Internal(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::Data(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Internal(m) => f.write_str(m),
        }
    }
}

impl From<dpl_core::Error> for CliError {
    fn from(err: dpl_core::Error) -> Self {
        use dpl_core::Error as E;
        match err {
            E::InvalidArgument(_) => Self::Usage(err.to_string()),
            E::Io(_)
            | E::Json(_)
            | E::Schema { .. }
            | E::Domain(_)
            | E::UnknownConfig(_)
            | E::BudgetOutOfRange { .. }
            | E::Empty(_)
            | E::ZeroSpan
            | E::ZeroVariance
            | E::Snapshot(_) => Self::Data(err.to_string()),
            _ => Self::Internal(err.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dpl",
    version,
    about = "Multi-fidelity HPO with deep power-law ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run optimizers over benchmarks and seeds, writing one trajectory CSV per run.
    Run(RunArgs),
    /// Forecast final losses from curve prefixes and score the ranking.
    Forecast(ForecastArgs),
    /// Generate a synthetic power-law benchmark.
    Synth(SynthArgs),
    /// Aggregate trajectory CSVs into mean and standard error of normalized regret.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Benchmark JSON files.
    #[arg(long, num_args = 1.., required = true)]
    benchmarks: Vec<PathBuf>,
    /// Comma-separated subset of dpl, rs, sh, hb, asha.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Step budget in units of b_max.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    budget_multiplier: u64,
    /// Steps added per DPL iteration.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    b_step: u64,
    /// Record wall time per trajectory point (outputs are then no longer reproducible).
    #[arg(long)]
    wall_time: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[arg(long)]
    benchmark: PathBuf,
    /// Comma-separated observed fractions in (0, 1).
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_fraction)]
    fractions: Vec<f64>,
    /// Comma-separated subset of DPL, PL, CondNN.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_model)]
    models: Vec<ForecastModel>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    configs: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    hp_dim: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    b_max: u64,
    #[arg(long, default_value_t = 0.0, value_parser = parse_noise)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.trim().parse().map_err(|e: dpl_core::Error| e.to_string())
}

fn parse_model(s: &str) -> Result<ForecastModel, String> {
    s.trim().parse().map_err(|e: dpl_core::Error| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("fraction must lie in (0, 1), got {v}"))
    }
}

fn parse_noise(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("noise must be a non-negative number, got {v}"))
    }
}

fn unique<T: Copy + Eq + std::hash::Hash + fmt::Display>(
    values: &[T],
    what: &str,
) -> Result<(), CliError> {
    let mut seen = HashSet::new();
    for v in values {
        if !seen.insert(*v) {
            return Err(CliError::Usage(format!("{what} '{v}' given twice")));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Keeps file names portable.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    unique(&args.methods, "method")?;
    unique(&args.seeds, "seed")?;
    let mut tables = Vec::new();
    let mut names = HashSet::new();
    for path in &args.benchmarks {
        let table = BenchmarkTable::load(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if !names.insert(file_stem(table.name())) {
            return Err(CliError::Data(format!(
                "{}: benchmark name '{}' is used by another file",
                path.display(),
                table.name()
            )));
        }
        tables.push(table);
    }
    create_dir(&args.out)?;

    let mut tasks = Vec::new();
    for table in &tables {
        for &method in &args.methods {
            for &seed in &args.seeds {
                tasks.push((table, method, seed));
            }
        }
    }
    let results: Vec<Result<(PathBuf, Vec<report::TrajectoryRow>), CliError>> = tasks
        .par_iter()
        .map(|&(table, method, seed)| {
            let mut settings = RunSettings::for_table(table, args.budget_multiplier as usize, seed);
            settings.b_step = args.b_step as usize;
            settings.record_wall_time = args.wall_time;
            let trajectory = method.run(table, settings)?;
            let rows = trajectory_rows(&trajectory, seed, method.name(), table.name());
            let file = format!(
                "{}_{}_seed{}.csv",
                file_stem(table.name()),
                method.name(),
                seed
            );
            Ok((args.out.join(file), rows))
        })
        .collect();
    for result in results {
        let (path, rows) = result?;
        write_trajectory(&path, &rows)?;
    }
    let aggregate = args.out.join("aggregate.csv");
    let n = report_dir(&args.out, &aggregate)?;
    println!("wrote {n} trajectories and {}", aggregate.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub model: String,
    pub fraction: f64,
    pub seed: u64,
    pub spearman: f64,
    pub mean_abs_rel_error: f64,
}

fn cmd_forecast(args: ForecastArgs) -> Result<(), CliError> {
    unique(&args.models, "model")?;
    unique(&args.seeds, "seed")?;
    let table = BenchmarkTable::load(&args.benchmark)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.benchmark.display())))?;
    let mut tasks = Vec::new();
    for &fraction in &args.fractions {
        for &model in &args.models {
            for &seed in &args.seeds {
                tasks.push((fraction, model, seed));
            }
        }
    }
    let rows: Vec<ForecastRow> = tasks
        .par_iter()
        .map(|&(fraction, model, seed)| {
            let r = run_forecast_experiment(&table, fraction, model, seed)?;
            Ok(ForecastRow {
                model: model.name().to_string(),
                fraction,
                seed,
                spearman: r.spearman,
                mean_abs_rel_error: r.mean_abs_rel_error,
            })
        })
        .collect::<Result<_, CliError>>()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut writer = csv::Writer::from_path(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::io(&args.out, e))?;
    }
    writer.flush().map_err(|e| CliError::io(&args.out, e))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let table = generate_synthetic(
        args.seed,
        args.configs as usize,
        args.hp_dim as usize,
        args.b_max as usize,
        args.noise,
    )?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    table
        .save(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    println!("oracle {}", table.oracle());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let n = report_dir(&args.input, &args.out)?;
    println!("aggregated {n} trajectories into {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
