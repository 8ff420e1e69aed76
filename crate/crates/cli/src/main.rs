use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdfeel::config::{ExperimentConfig, RunMode};
use sdfeel::runner::{evaluate_bound, run_experiment, run_replicates, RunError, RunSummary};
use sdfeel::Error;

#[derive(Parser)]
#[command(
    name = "sdfeel",
    version,
    about = "Semi-decentralized federated edge learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write traces, final models and a summary.
    Run {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory. Defaults to `out.dir` from the config, then
        /// `$SDFEEL_OUT/<run_id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "SDFEEL_OUT", default_value = "runs", hide_env_values = true)]
        out_root: PathBuf,
        /// Independent replicates with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        /// Replicates run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Parse and validate a config, then print the resolved settings.
    Validate { config: PathBuf },
    /// Evaluate the convergence bound for a config without training.
    Bound { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Async,
    Sync,
    Both,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Validation(_) | Error::DimensionMismatch { .. } | Error::Parse { .. } => 1,
        Error::Diverged { .. } | Error::Protocol(_) | Error::Invariant(_) => 2,
        Error::Io { .. } => 3,
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(e))
}

fn report(summary: &RunSummary) {
    for r in &summary.runs {
        let ttt = r.time_to_target.map_or("-".to_string(), |t| format!("{t:.3}"));
        println!(
            "{} seed={} mode={} k={} time={:.3} loss={:.6} time_to_target={} staleness={}/{}",
            summary.run_id,
            summary.seed,
            r.mode,
            r.iterations,
            r.sim_time,
            r.final_loss,
            ttt,
            r.max_staleness_observed,
            r.staleness_bound,
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                print!("{}", cfg.to_text());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Bound { config } => match ExperimentConfig::load(&config).and_then(|c| evaluate_bound(&c)) {
            Ok(ev) => {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&ev).expect("bound report serializes")
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run {
            config,
            mode,
            seed,
            out,
            out_root,
            replicates,
            parallel,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Async => RunMode::Async,
                    ModeArg::Sync => RunMode::Sync,
                    ModeArg::Both => RunMode::Both,
                };
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| out_root.join(&cfg.run_id));
            if replicates == 0 {
                return fail(&Error::config_msg("--replicates must be at least 1"));
            }

            let results: Vec<Result<RunSummary, RunError>> = if replicates == 1 {
                vec![run_experiment(&cfg, &dir)]
            } else {
                run_replicates(&cfg, &dir, replicates, parallel)
                    .into_iter()
                    .map(|(_, r)| r)
                    .collect()
            };
            let mut worst = 0u8;
            for r in &results {
                match r {
                    Ok(s) => report(s),
                    Err(e) => {
                        if let Some(s) = &e.summary {
                            report(s);
                        }
                        eprintln!("error: {e}");
                        worst = worst.max(exit_code(&e.error));
                    }
                }
            }
            ExitCode::from(worst)
        }
    }
}
