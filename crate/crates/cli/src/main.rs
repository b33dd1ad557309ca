use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bifbm_core::experiment::{self, error_exit_code, ExperimentConfig, ExperimentKind};
use bifbm_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bifbm", version, about = "Simulation and verification experiments for bifractional Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON, schema v1).
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json and CSV artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides mc.seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the Monte-Carlo loops.
    #[arg(long, env = "BIFBM_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    Simulate(RunArgs),
    Qv(RunArgs),
    Ito(RunArgs),
    Tanaka(RunArgs),
    Chaos(RunArgs),
    Potential(RunArgs),
    /// Prints the experiment kinds as a JSON array.
    List,
    /// Prints the fields and defaults of one experiment kind.
    Describe { kind: String },
    /// Re-runs the configuration embedded in a report.
    Replay(ReplayArgs),
    /// Checks a report against the published schema.
    Validate { report: PathBuf },
    /// Prints the report JSON schema.
    Schema,
}

#[derive(Args)]
struct ReplayArgs {
    report: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "BIFBM_THREADS")]
    threads: Option<usize>,
}

fn set_threads(threads: Option<usize>) -> Result<(), Error> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config(vec!["--threads must be at least 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(vec![e.to_string()]))?;
    }
    Ok(())
}

fn read(path: &PathBuf) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
}

fn run_kind(kind: ExperimentKind, args: RunArgs) -> Result<i32, Error> {
    set_threads(args.threads)?;
    let config = ExperimentConfig::from_json_with_seed(&read(&args.config)?, args.seed)?;
    if config.kind != kind {
        return Err(Error::Config(vec![format!(
            "configuration is for '{}' but the '{}' command was used",
            config.kind, kind
        )]));
    }
    let report = experiment::run(&config, args.out.as_deref())?;
    println!("{}", report.to_json());
    Ok(report.exit_code())
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    let kind = match &cli.command {
        Command::Simulate(_) => Some(ExperimentKind::Simulate),
        Command::Qv(_) => Some(ExperimentKind::Qv),
        Command::Ito(_) => Some(ExperimentKind::Ito),
        Command::Tanaka(_) => Some(ExperimentKind::Tanaka),
        Command::Chaos(_) => Some(ExperimentKind::Chaos),
        Command::Potential(_) => Some(ExperimentKind::Potential),
        _ => None,
    };
    match cli.command {
        Command::Simulate(a) | Command::Qv(a) | Command::Ito(a) | Command::Tanaka(a) | Command::Chaos(a) | Command::Potential(a) => {
            run_kind(kind.expect("run command"), a)
        }
        Command::List => {
            println!("{}", serde_json::to_string(&experiment::list_experiments())?);
            Ok(0)
        }
        Command::Describe { kind } => {
            println!("{}", serde_json::to_string_pretty(&experiment::describe(&kind)?)?);
            Ok(0)
        }
        Command::Replay(a) => {
            set_threads(a.threads)?;
            let report = experiment::replay(&read(&a.report)?, a.out.as_deref())?;
            println!("{}", report.to_json());
            Ok(report.exit_code())
        }
        Command::Validate { report } => {
            let doc: serde_json::Value =
                serde_json::from_str(&read(&report)?).map_err(|e| Error::Config(vec![e.to_string()]))?;
            experiment::validate_report(&doc)?;
            println!("valid");
            Ok(0)
        }
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&experiment::report_schema())?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            match &err {
                Error::Config(list) => {
                    eprintln!("invalid configuration:");
                    for item in list {
                        eprintln!("  - {item}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(error_exit_code(&err) as u8)
        }
    }
}
