//! `machplan` command-line entry point.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "machplan", version, about = "Machining operation sequence prediction pipeline")]
struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled mesh dataset from a parameter grid.
    Gen {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, env = "MPG_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a generated dataset into process and design graphs.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on extracted graphs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured training seed.
        #[arg(long, env = "MPG_SEED")]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the test split of its training run.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "tf")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every row of a hyperparameter grid.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
        #[arg(long, env = "MPG_SEED")]
        seed: Option<u64>,
    },
    /// Train the encoder and sequence-model variants side by side.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ablate_out")]
        out: PathBuf,
        #[arg(long, env = "MPG_SEED")]
        seed: Option<u64>,
    },
    /// Export per-step decoder embeddings as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    let msg = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    eprintln!("error: kind={kind} msg=\"{msg}\"");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    if let Some(n) = cli.threads {
        machplan::exec::set_threads(n);
    }
    let result = match cli.command {
        Command::Gen { grid, seed, out } => commands::gen(&grid, seed, &out),
        Command::Extract { data, out } => commands::extract(&data, &out),
        Command::Train { data, config, out, seed } => commands::train(&data, &config, &out, seed),
        Command::Eval { checkpoint, data, mode, out } => commands::eval(&checkpoint, &data, &mode, out.as_deref()),
        Command::Sweep { data, grid, out, seed } => commands::sweep(&data, &grid, &out, seed),
        Command::Ablate { data, config, out, seed } => commands::ablate(&data, &config, &out, seed),
        Command::Embed { checkpoint, data, out } => commands::embed(&checkpoint, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
