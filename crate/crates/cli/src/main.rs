use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metamorph_cli::config::{schema, ExperimentConfig};
use metamorph_cli::run::{apply_overrides, run, validate, RunOptions};
use metamorph_cli::CliError;

#[derive(Parser)]
#[command(name = "metamorph", version, about = "Stochastic metamorphosis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its outputs.
    Run {
        config: PathBuf,
        /// Output directory (overrides output.directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides ensemble.base_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress progress and warnings on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Print the config JSON Schema.
    Schema,
}

fn threads() -> Result<Option<usize>, CliError> {
    match std::env::var("METAMORPH_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::validation(format!(
                "METAMORPH_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&schema()).expect("schema serializes"));
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            for w in validate(&cfg)? {
                eprintln!("warning: {w}");
            }
            println!("{}: ok ({})", config.display(), cfg.name());
            Ok(())
        }
        Command::Run {
            config,
            out,
            seed,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            apply_overrides(&mut cfg, &RunOptions { out, seed });
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads()?.unwrap_or(0))
                .build()
                .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
            if !quiet {
                eprintln!("running {} with {} worker(s)", cfg.name(), pool.current_num_threads());
            }
            let report = pool.install(|| run(&cfg))?;
            if !quiet {
                for w in &report.warnings {
                    eprintln!("warning: {w}");
                }
                eprintln!("wrote {} file(s) to {}", report.files.len(), report.directory.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metamorph: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
