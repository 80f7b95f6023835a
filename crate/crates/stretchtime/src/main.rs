use clap::{Parser, Subcommand};
use std::path::PathBuf;
use stretchtime::cli::{self, EvalSplit, EvaluateArgs};

#[derive(Parser)]
#[command(
    name = "stretchtime",
    about = "Symplectic positional embeddings and the StretchTime forecaster"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic warped seasonal dataset as CSV.
    Generate {
        /// Experiment config file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path; a .config and a .tau sidecar are written next
        /// to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per configured horizon.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint (or the persistence baseline) on one split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Dump k sample windows as forecasts.csv for plotting.
        #[arg(long)]
        dump_forecasts: Option<usize>,
        /// Score the trivial last-value forecaster instead of a model.
        #[arg(long, default_value_t = false)]
        persistence: bool,
    },
    /// Run the numerical verification suite and write the report CSV.
    Verify {
        #[arg(long, default_value_t = 2026)]
        seed: u64,
        #[arg(long, default_value = "verify_report.csv")]
        report: PathBuf,
    },
    /// Train sype and the rotary baseline side by side on the same data.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), cli::CliError> {
    match cmd {
        Command::Generate { config, out } => cli::cmd_generate(&config, &out),
        Command::Train { config } => cli::cmd_train(&config),
        Command::Evaluate {
            config,
            checkpoint,
            out,
            split,
            dump_forecasts,
            persistence,
        } => {
            let split = match split.as_str() {
                "train" => EvalSplit::Train,
                "val" => EvalSplit::Val,
                "test" => EvalSplit::Test,
                other => {
                    return Err(cli::CliError::Usage(format!(
                        "unknown split `{other}` (expected train|val|test)"
                    )))
                }
            };
            cli::cmd_evaluate(&EvaluateArgs {
                checkpoint: checkpoint.as_deref(),
                config: &config,
                out_dir: &out,
                split,
                dump_forecasts,
                persistence,
            })
        }
        Command::Verify { seed, report } => cli::cmd_verify(seed, &report),
        Command::Compare { config } => cli::cmd_compare(&config),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
