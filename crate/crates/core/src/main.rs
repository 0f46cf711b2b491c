use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semcom::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "semcom", version, about = "Semantic-communication restoration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a PSNR grid experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tiny denoiser described by the config's [train] section.
    TrainDenoiser {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn run(cli: Cli) -> semcom::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let dir = cfg.output_dir.clone();
            let report = harness::run_experiment(cfg)?;
            for s in &report.summary {
                println!(
                    "{:<8} psnr {:>5} ok {:>4} failed {:>3}  snr {:>8}  fd_all {:>8}  fd_inp {:>8}",
                    s.method.as_str(),
                    s.psnr_db,
                    s.n_ok,
                    s.n_failed,
                    fmt(s.snr_restored_mean),
                    fmt(s.fd_all_mean),
                    fmt(s.fd_inp_mean),
                );
            }
            println!("wrote {}", dir.display());
            if report.failed > 0 {
                eprintln!("{} trials failed; see trials.csv", report.failed);
            }
            Ok(true)
        }
        Command::TrainDenoiser { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, report, path) = harness::train_from_config(&cfg)?;
            for (e, (train, held)) in report.epoch_losses.iter().zip(&report.heldout_losses).enumerate() {
                println!("epoch {e:>4}  train {train:.5}  heldout {held:.5}");
            }
            println!("saved {}", path.display());
            Ok(true)
        }
        Command::Selftest => {
            let checks = semcom::selftest::run();
            for c in &checks {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:<24} {}", c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
