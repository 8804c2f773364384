//! Command-line driver: run experiment sweeps, certify schedules, and emit
//! built-in problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dsmreg::bench::{parse_config, run_experiment, write_outputs, ProblemSpec, TargetSpec};
use dsmreg::io::{write_problem_json, ProblemArchive};
use dsmreg::{DsmError, ScheduleSpec};

/// Sample horizon for schedule certification.
const VALIDATE_T_MAX: f64 = 1e6;
/// Sample count for schedule certification.
const VALIDATE_SAMPLES: usize = 2000;

#[derive(Parser)]
#[command(
    name = "dsmreg",
    version,
    about = "Regularization of linear ill-posed problems by an integrated damped flow",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a JSON config and write runs.csv,
    /// rates.csv, and timings.csv
    Run {
        /// Path to the experiment configuration (JSON)
        config: PathBuf,
        /// Output directory (overrides the config's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: one per logical CPU)
        #[arg(long)]
        jobs: Option<usize>,
        /// Integrator relative tolerance (overrides the config)
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Certify a schedule spec (JSON) and print the report; exits with
    /// status 2 when the schedule fails certification
    ValidateSchedule {
        /// Path to the schedule spec (JSON)
        spec: PathBuf,
    },
    /// Construct a built-in problem and write it as a JSON archive
    Problem {
        /// Problem family
        kind: ProblemKind,
        /// Discretization size
        #[arg(long)]
        n: usize,
        /// Output file
        #[arg(long)]
        emit: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemKind {
    /// Hilbert matrix with the smooth default target
    Hilbert,
    /// Gravimetric prospecting kernel
    Gravity,
    /// Second-derivative (Green's function) kernel
    Deriv2,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, DsmError> {
    match cli.command {
        Command::Run { config, out, jobs, tol } => run_command(&config, out, jobs, tol),
        Command::ValidateSchedule { spec } => validate_command(&spec),
        Command::Problem { kind, n, emit } => problem_command(kind, n, &emit),
    }
}

fn run_command(
    config_path: &Path,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    tol: Option<f64>,
) -> Result<ExitCode, DsmError> {
    let text = std::fs::read_to_string(config_path)?;
    let mut config = parse_config(&text)?;
    if let Some(tol) = tol {
        config.integrator_tol = tol;
        config.validate()?;
    }
    let outcome = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| DsmError::InvalidArgument(format!("worker pool: {e}")))?
            .install(|| run_experiment(&config)),
        None => run_experiment(&config),
    }?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&config.output_dir));
    write_outputs(&dir, &outcome)?;

    let ok = outcome.records.iter().filter(|r| r.is_ok()).count();
    let skipped = outcome
        .records
        .iter()
        .filter(|r| r.status.starts_with("skipped:"))
        .count();
    let failed = outcome.records.len() - ok - skipped;
    println!(
        "{} runs: {ok} ok, {skipped} skipped, {failed} failed; {} rate fits",
        outcome.records.len(),
        outcome.rates.len()
    );
    println!("wrote {}", dir.join("runs.csv").display());
    println!("wrote {}", dir.join("rates.csv").display());
    println!("wrote {}", dir.join("timings.csv").display());
    if outcome.records.iter().any(|r| r.eta_violated) {
        eprintln!("warning: predicted-bound violations recorded; see runs.csv");
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_command(spec_path: &Path) -> Result<ExitCode, DsmError> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: ScheduleSpec = serde_json::from_str(&text).map_err(|e| DsmError::Parse {
        context: "schedule spec".to_string(),
        message: e.to_string(),
    })?;
    let schedule = spec.build()?;
    let report = schedule.validate(VALIDATE_T_MAX, VALIDATE_SAMPLES)?;
    println!("{report}");
    if report.certified() {
        println!("{}: certified", spec.label());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{}: NOT certified", spec.label());
        Ok(ExitCode::from(2))
    }
}

fn problem_command(kind: ProblemKind, n: usize, emit: &Path) -> Result<ExitCode, DsmError> {
    let spec = match kind {
        ProblemKind::Hilbert => ProblemSpec::Hilbert {
            n,
            target: TargetSpec::Smooth,
        },
        ProblemKind::Gravity => ProblemSpec::Gravity { n, target: None },
        ProblemKind::Deriv2 => ProblemSpec::Deriv2 { n, target: None },
    };
    let instance = dsmreg::bench::build_problem(&spec)?;
    let archive = ProblemArchive::from_instance(&instance, 0.0, 0);
    let file = std::fs::File::create(emit)?;
    write_problem_json(std::io::BufWriter::new(file), &archive)?;
    println!("wrote {} ({})", emit.display(), instance.name);
    Ok(ExitCode::SUCCESS)
}
