use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehrpipe_cli::commands::{self, CliError, SynthOverrides};

#[derive(Parser)]
#[command(
    name = "ehrpipe",
    version,
    about = "Configurable EHR preprocessing, baseline modeling and fairness audit"
)]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline from a configuration file; absent keys take task defaults.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun a complete provenance.cfg exactly.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Interactive stage-by-stage session.
    Wizard {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Generate a synthetic dataset in the input table format.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        corrupt_fraction: Option<f64>,
    },
    /// Score a predictions file and audit fairness.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        demographics: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Extract {
            input,
            output,
            config,
            seed,
        } => commands::extract(&input, &output, &config, seed),
        Command::Replay { input, output, config } => commands::replay(&input, &output, &config),
        Command::Wizard { input, output, seed } => {
            let stdin = io::stdin();
            let mut lock = stdin.lock();
            let mut stdout = io::stdout();
            commands::wizard(&input, &output, seed, &mut lock, &mut stdout).map(|_| ())
        }
        Command::Synth {
            output,
            config,
            seed,
            patients,
            corrupt_fraction,
        } => commands::synth(
            &output,
            config.as_deref(),
            &SynthOverrides {
                seed,
                patients,
                corrupt_fraction,
            },
        ),
        Command::Evaluate {
            predictions,
            demographics,
            output,
            threshold,
            bins,
        } => commands::evaluate(&predictions, demographics.as_deref(), &output, threshold, bins),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
