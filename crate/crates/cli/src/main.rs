use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bhp_lab::{load_config, run, Command, Overrides};
use clap::{Parser, Subcommand};

/// Simulation and verification laboratory for branching Hunt processes.
#[derive(Parser, Debug)]
#[command(name = "bhp-lab", version)]
struct Cli {
    /// JSON configuration or a manifest written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to BHP_LAB_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Ground state, spectral gap and kernel checks.
    Spectral,
    /// Simulate forests and write them as TSV records.
    Simulate,
    /// Simulate spine trees under the size-biased measure.
    Spine,
    /// Run a Monte Carlo experiment.
    Verify {
        /// martingale | wlln | slln | spine_consistency | spine_decomposition
        experiment: String,
    },
    /// Summarise stored reports.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command = match cli.command {
        Cmd::Spectral => Command::Spectral,
        Cmd::Simulate => Command::Simulate,
        Cmd::Spine => Command::Spine,
        Cmd::Verify { experiment } => Command::Verify(experiment),
        Cmd::Report { dir } => Command::Report(dir),
    };
    let result = (|| {
        let loaded = match (&command, &cli.config) {
            (Command::Report(_), _) | (_, None) => None,
            (_, Some(path)) => Some(load_config(path)?),
        };
        let ov = Overrides { seed: cli.seed, workers: cli.workers, out: cli.out.clone() };
        run(&command, loaded, &ov)
    })();
    match result {
        Ok(outcome) => {
            // A closed pipe (`| head`) is not an error for the run itself.
            let mut out = std::io::stdout().lock();
            let _ = write!(out, "{}", outcome.summary);
            if let Some(dir) = &outcome.out_dir {
                let _ = writeln!(out, "outputs written to {}", dir.display());
            }
            ExitCode::from(outcome.code as u8)
        }
        Err(e) => {
            eprintln!("bhp-lab: {e}");
            ExitCode::from(1)
        }
    }
}
