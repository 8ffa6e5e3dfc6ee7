use std::path::PathBuf;
use std::process::ExitCode;

use avalign_cli::commands::{self, eval::Task, train::TrainOptions};
use avalign_cli::config::{parse_stages, ModelKind};
use avalign_cli::{CliError, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "avalign", version, about = "Curriculum audio-visual alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a graded scene archive.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_per_stage: usize,
        #[arg(long, default_value_t = 3)]
        max_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the alignment model (or a separator) into a new run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated stage list, e.g. `1,2`.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// Continue a previous run from its latest checkpoint.
        #[arg(long, conflicts_with_all = ["config", "seed", "stages", "model"])]
        resume: Option<PathBuf>,
        /// Trained alignment run used for separator guidance.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, hide = true)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train a source counter, optionally warm-started from an alignment run.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-op report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n_per_stage, max_k, seed, force } => {
            commands::synth::run(&out, n_per_stage, max_k, seed, force)?;
        }
        Command::Train { config, out, seed, stages, model, resume, init, max_epochs } => {
            let mut cfg = match &resume {
                Some(run) => commands::train::run_config(run)?,
                None => commands::resolve_config(config.as_deref(), seed)?,
            };
            if let Some(s) = stages {
                cfg.cavl.stages = parse_stages(&s)?;
            }
            if let Some(m) = model {
                cfg.model = m;
            }
            let dir = commands::train::run(cfg, &out, &TrainOptions { resume, init, max_epochs })?;
            println!("{}", dir.display());
        }
        Command::Eval { run, task, out } => {
            let dir = commands::eval::run(&run, task, &out)?;
            println!("{}", dir.display());
        }
        Command::Count { config, out, seed, init } => {
            let cfg = commands::resolve_config(config.as_deref(), seed)?;
            let dir = commands::count::run(cfg, &out, init.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Gradcheck { seed, out, corrupt } => {
            commands::gradcheck::run(seed, corrupt.as_deref(), out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["avalign", "train", "--stages", "1,2", "--seed", "4", "--out", "r"]).unwrap();
        assert!(matches!(cli.command, Command::Train { seed: Some(4), .. }));
        assert!(Cli::try_parse_from(["avalign", "train", "--resume", "a", "--seed", "1"]).is_err());
        assert!(Cli::try_parse_from(["avalign", "eval", "--run", "a", "--task", "dance"]).is_err());
        let cli = Cli::try_parse_from(["avalign", "synth", "--out", "s", "--force"]).unwrap();
        assert!(matches!(cli.command, Command::Synth { force: true, max_k: 3, .. }));
    }

    #[test]
    fn validation_failures_exit_with_two() {
        assert_eq!(exit_code(&CliError::Validation("x".into())), 2);
        assert_eq!(exit_code(&CliError::GradcheckFailed(vec!["a".into()])), 1);
        let bad_stages = run(Cli::try_parse_from(["avalign", "train", "--stages", "1,x"]).unwrap()).unwrap_err();
        assert_eq!(exit_code(&bad_stages), 2);
    }
}
