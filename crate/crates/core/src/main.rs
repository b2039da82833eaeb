use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loma::cli::{run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "loma", version, about = "Forgery localization with selective state space models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a manifest and save the best-validation checkpoint
    Train(Flags),
    /// Score a checkpoint on every split of a manifest
    Eval(Flags),
    /// Write probability maps and binary masks for every image of a manifest
    Predict(Flags),
    /// Compare analytic and central-difference gradients
    Gradcheck(Flags),
    /// Time the selective scan against dense attention and report op counts
    Bench(Flags),
    /// Generate a synthetic forgery dataset with its manifest
    Synth(Flags),
}

#[derive(Args)]
struct Flags {
    /// Plain-text `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `manifest.txt` and the files it lists
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Single-threaded and sequential; runs with equal seeds are bitwise identical
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, f) = match cli.command {
        Cmd::Train(f) => (Command::Train, f),
        Cmd::Eval(f) => (Command::Eval, f),
        Cmd::Predict(f) => (Command::Predict, f),
        Cmd::Gradcheck(f) => (Command::Gradcheck, f),
        Cmd::Bench(f) => (Command::Bench, f),
        Cmd::Synth(f) => (Command::Synth, f),
    };
    let rc = RunConfig {
        command,
        config: f.config,
        data_root: f.data_root,
        checkpoint: f.checkpoint,
        out: f.out,
        seed: f.seed,
        threads: f.threads,
        deterministic: f.deterministic,
    };
    match run(&rc) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("loma {}: {}", command.name(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
