use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fixquant::cli::{self, Command, Overrides};

#[derive(Parser)]
#[command(
    name = "fixquant",
    version,
    about = "Fixed-point quantization of CNNs: evaluate, train, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Accuracy of a quantized network against its float baseline.
    Eval(RunArgs),
    /// Train with SGD, optionally with quantized gradients.
    Train(RunArgs),
    /// Per-subunit (W, F) sweep and bottleneck search.
    Sweep(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for `sweep`.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = match parsed.command {
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        jobs: args.jobs,
    };
    match cli::run(command, &args.config, &overrides) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
