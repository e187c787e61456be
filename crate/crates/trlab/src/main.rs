//! CLI entry point: train / compare / scale / swap / report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trlab::runner;

#[derive(Parser)]
#[command(
    name = "trlab",
    about = "Desk-scale laboratory for certified trust-region training of turn-taking token teams",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file path or preset name (train-small, compare-modes,
    /// scale-sweep, swap-demo).
    #[arg(long)]
    config: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's out_dir or ./runs/<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent cells (modes, sweep arms).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run stage-wise fresh-rollout training and write run artifacts.
    Train(RunArgs),
    /// Run every configured mode under shared seeds and budgets.
    Compare(RunArgs),
    /// Team-size scaling sweep with fitted drift exponents.
    Scale(RunArgs),
    /// Agent replacement: direct, stage-0 aligned, and retrain strategies.
    Swap(RunArgs),
    /// Consolidate a finished run directory into a report bundle.
    Report {
        /// Directory produced by `train`.
        #[arg(long)]
        run_dir: PathBuf,
        /// Where to write report.json (defaults to the run dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(args: &RunArgs) -> trlab::Result<(trlab::config::RunConfig, PathBuf)> {
    let mut cfg = runner::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.hash()));
    Ok((cfg, out))
}

fn run() -> trlab::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let (cfg, out) = resolve(&args)?;
            let summary = runner::cmd_train(&cfg, &out)?;
            println!(
                "train: {} stages, J {:.6} -> {:.6}, exact-certificate violations {:.1}%, artifacts in {}",
                summary.stages,
                summary.j_trace.first().unwrap_or(&0.0),
                summary.final_j,
                100.0 * summary.violation_rate_exact,
                out.display()
            );
        }
        Command::Compare(args) => {
            let (cfg, out) = resolve(&args)?;
            let summary = runner::cmd_compare(&cfg, &out, args.threads)?;
            for (mode, j) in summary.modes.iter().zip(&summary.final_j) {
                println!("compare: {} final J {:.6}", runner::mode_dir_name(*mode), j);
            }
            println!("compare: artifacts in {}", out.display());
        }
        Command::Scale(args) => {
            let (cfg, out) = resolve(&args)?;
            let summary = runner::cmd_scale(&cfg, &out, args.threads)?;
            println!(
                "scale: penalty exponents stale {:.3} vs fresh {:.3}; gap exponents {:.3} vs {:.3}; drift exponents {:.3} vs {:.3}; artifacts in {}",
                summary.alpha_penalty_stale,
                summary.alpha_penalty_fresh,
                summary.alpha_delta_stale,
                summary.alpha_delta_fresh,
                summary.alpha_docc_stale,
                summary.alpha_docc_fresh,
                out.display()
            );
        }
        Command::Swap(args) => {
            let (cfg, out) = resolve(&args)?;
            let summary = runner::cmd_swap(&cfg, &out)?;
            println!(
                "swap: shock direct {:.6} vs aligned {:.6}; final J direct {:.6} / aligned {:.6} / retrain {:.6}; artifacts in {}",
                summary.direct_shock,
                summary.aligned_shock,
                summary.final_j_direct,
                summary.final_j_aligned,
                summary.final_j_retrain,
                out.display()
            );
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.clone());
            let report = runner::cmd_report(&run_dir, &out)?;
            println!(
                "report: {} stages, violation rate {:.1}%, rank correlation {}, report in {}",
                report.n_stages,
                100.0 * report.violation_rate,
                report
                    .rank_correlation
                    .map(|r| format!("{r:.3}"))
                    .unwrap_or_else(|| "undefined".into()),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
