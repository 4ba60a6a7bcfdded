use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use featgen::cli::{self, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "featgen", version, about = "Agent-driven explainable feature generation")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Print the metrics table of a finished run.
    Report { dir: PathBuf },
    /// Show where a feature of the final subset came from.
    Explain { dir: PathBuf, feature: String },
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Run {
            config,
            seed,
            iterations,
            agents,
        } => {
            let mut c = RunConfig::load(&config)?;
            c.apply(Overrides {
                seed,
                iterations,
                agents,
            });
            let (dir, s) = cli::cmd_run(&c)?;
            Ok(format!(
                "run directory: {}\nbaseline {:.4} -> best {:.4} ({:+.4})\nfeatures: {}\n",
                dir.display(),
                s.metric.of(&s.theta_0),
                s.metric.of(&s.theta_best),
                s.improvement,
                s.features.join(" ")
            ))
        }
        Command::Report { dir } => cli::cmd_report(&dir),
        Command::Explain { dir, feature } => cli::cmd_explain(&dir, &feature),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Args::parse().command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
