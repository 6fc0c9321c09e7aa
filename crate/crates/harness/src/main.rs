use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgi_harness::config::{parse_grid, ExperimentConfig};
use mgi_harness::pipeline::{read_report, run_pipeline};
use mgi_harness::HarnessError;

/// Multiplexed ghost imaging simulator.
#[derive(Parser)]
#[command(name = "mgi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an acquisition, reduce it and write images and a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid override, e.g. 32x32. The bundled object is resampled.
        #[arg(long)]
        grid: Option<String>,
        /// Use the noiseless correlator means.
        #[arg(long)]
        no_noise: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the report of a finished run.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            grid,
            no_noise,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(g) = grid {
                cfg.params.grid = parse_grid(&g)?;
            }
            if no_noise {
                cfg.noise = false;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let result = run_pipeline(&cfg)?;
            print!("{}", result.report.to_text());
            println!("output = {}", result.dir.display());
        }
        Command::Report { dir } => print!("{}", read_report(&dir)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
