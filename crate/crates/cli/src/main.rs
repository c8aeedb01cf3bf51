//! `dircol`: convergence, structure and crane benchmark experiments.
//!
//! Exit codes: 0 success, 1 a property check or I/O step failed, 2 usage or
//! configuration error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dircol::basis::PointFamily;
use dircol::exec::Execution;
use dircol::experiments::{
    crane_checks, pareto_points, run_convergence, run_crane_batch, slope_checks, structure_report,
    write_crane_csv, write_pareto_csv, write_summary_csv, Check, CraneThresholds, ExperimentConfig,
};
use dircol::integrator::{write_convergence_csv, Method};

#[derive(Debug, Parser)]
#[command(name = "dircol", version, about = "Standard vs position-based direct collocation experiments")]
struct Cli {
    /// Seed for instance sampling (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run untimed work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Global error and fitted order on q'' + q = cos t.
    Convergence {
        #[arg(long = "d", value_delimiter = ',', default_values_t = [2usize, 3])]
        d: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [PointFamily::GaussLegendre, PointFamily::RadauIIA])]
        family: Vec<PointFamily>,
        #[arg(long = "N", value_delimiter = ',', default_values_t = [10usize, 20, 40, 80, 160])]
        n: Vec<usize>,
    },
    /// NLP size and Jacobian nonzeros of the crane against the closed forms.
    Structure {
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long = "d", default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = Method::Standard)]
        method: Method,
        #[arg(long, default_value_t = PointFamily::RadauIIA)]
        family: PointFamily,
        /// Drop rope friction so the closed forms apply.
        #[arg(long)]
        beta0: bool,
    },
    /// Crane batch: one row per solve plus a per-configuration summary.
    Crane(BatchArgs),
    /// Crane batch reduced to (label, log10 |error|, ms per iteration) points.
    Bench(BatchArgs),
}

#[derive(Debug, Args)]
struct BatchArgs {
    /// Number of sampled instances (overrides the config file).
    #[arg(long)]
    n_instances: Option<usize>,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::Convergence { d, family, n } => {
            let rows = run_convergence(d, family, n, exec).map_err(|e| Failure::Usage(e.to_string()))?;
            write_output(cli.output.as_deref(), |w| write_convergence_csv(&rows, w))?;
            report(&slope_checks(&rows))
        }
        Command::Structure {
            n,
            d,
            method,
            family,
            beta0,
        } => {
            let mut crane = cfg.crane;
            if let Some(n) = n {
                crane.intervals = *n;
            }
            let rep = structure_report(crane, *method, *family, *d, *beta0).map_err(|e| Failure::Usage(e.to_string()))?;
            let json = serde_json::to_string_pretty(&rep)?;
            writeln!(io::stdout().lock(), "{json}")?;
            if let Some(path) = &cli.output {
                std::fs::write(path, format!("{json}\n"))?;
            }
            if rep.matches {
                Ok(())
            } else {
                Err(Failure::Run("structural counts differ from the closed forms".into()))
            }
        }
        Command::Crane(args) => {
            let cfg = batch_config(cfg, args)?;
            let batch = run_crane_batch(&cfg, exec)?;
            write_output(cli.output.as_deref(), |w| write_crane_csv(&batch, w))?;
            match &cli.output {
                Some(path) => write_output(Some(&summary_path(path)), |w| write_summary_csv(&batch, w))?,
                None => write_summary_csv(&batch, io::stderr().lock())?,
            }
            report(&crane_checks(&batch, CraneThresholds::default()))
        }
        Command::Bench(args) => {
            let cfg = batch_config(cfg, args)?;
            let batch = run_crane_batch(&cfg, exec)?;
            let points = pareto_points(&batch);
            write_output(cli.output.as_deref(), |w| write_pareto_csv(&points, w))?;
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn batch_config(mut cfg: ExperimentConfig, args: &BatchArgs) -> Result<ExperimentConfig, Failure> {
    if let Some(n) = args.n_instances {
        cfg.n_instances = n;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// `runs.csv` → `runs_summary.csv`.
fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("crane");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_summary.{ext}"),
        None => format!("{stem}_summary"),
    };
    path.with_file_name(name)
}

fn write_output<F>(path: Option<&Path>, f: F) -> Outcome
where
    F: FnOnce(&mut dyn Write) -> dircol::Result<()>,
{
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let mut w = io::stdout().lock();
            f(&mut w)?;
        }
    }
    Ok(())
}

fn report(checks: &[Check]) -> Outcome {
    for c in checks {
        eprintln!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Run(format!("{failed} of {} checks failed", checks.len())))
    }
}
