use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqal::cli::{self, CliError};

#[derive(Parser)]
#[command(name = "seqal", version, about = "Active learning simulations for sequence labeling")]
struct Args {
    /// Debug logging and per-sentence score dumps.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus from a JSON spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an active-learning experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the full train split.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate curves and snapshots of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn dispatch(args: &Args) -> Result<(), CliError> {
    match &args.command {
        Command::Generate { spec, out } => cli::cmd_generate(spec, out),
        Command::Run { config, out } => {
            let records = cli::cmd_run(config, out, args.verbose)?;
            if let Some(last) = records.last() {
                println!("{} rounds, final test f1 {:.4}", records.len(), last.test.f1);
            }
            Ok(())
        }
        Command::Baseline { config, out } => {
            let m = cli::cmd_baseline(config, out)?;
            println!("passive test f1 {:.4}", m.f1);
            Ok(())
        }
        Command::Report { run } => {
            let n = cli::cmd_report(run)?;
            println!("regenerated {n} rounds");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
