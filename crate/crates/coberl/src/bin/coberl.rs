use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coberl::config::RunConfig;
use coberl::envs::make_env;
use coberl::harness;
use coberl::metrics;
use coberl::model::NetConfig;

#[derive(Parser)]
#[command(name = "coberl", about = "Gated transformer+LSTM agent, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics plus a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (the run config is embedded in the file)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simpson AUC of the eval-return curve in a metrics CSV
    Auc {
        #[arg(long)]
        csv: PathBuf,
        /// clip the curve at this threshold before integrating
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Summarize one or more per-seed metrics CSVs
    Summarize {
        #[arg(long, num_args = 1.., required = true)]
        csv: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> coberl::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let output = harness::train(&cfg, &out)?;
            println!(
                "trained {} env steps, {} learner steps",
                output.env_steps, output.learner_steps
            );
            println!("metrics: {}", output.metrics_path.display());
            println!("checkpoint: {}", output.checkpoint_path.display());
            if let Some(mean) = harness::final_window_summary(&output, cfg.total_env_steps as u64)
            {
                println!("final-5% eval return: {mean:.4}");
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let (params, meta) = numerics::checkpoint::load_params(&checkpoint)?;
            let cfg = RunConfig::from_text(&meta)?;
            let env = make_env(&cfg, 0)?;
            let net = NetConfig::from_run(&cfg, env.n_actions(), env.obs_shape())?;
            drop(env);
            let mean = harness::evaluate(&net, &params, &cfg, seed.unwrap_or(cfg.seed), episodes)?;
            println!("mean return over {episodes} episode(s): {mean:.4}");
            Ok(())
        }
        Command::Auc { csv, threshold } => {
            let rows = metrics::read_metrics(&csv)?;
            let curve = metrics::eval_curve(&rows)?;
            let resampled = metrics::resample_uniform(&curve, metrics::AUC_DELTA)?;
            let auc = match threshold {
                Some(t) => metrics::auc_above_threshold(&resampled, t)?,
                None => metrics::compute_auc(&resampled)?,
            };
            if let Some(w) = &auc.warning {
                eprintln!("warning: {w}");
            }
            println!("auc = {}", auc.value);
            Ok(())
        }
        Command::Summarize { csv } => {
            let summary = metrics::summarize_run(&csv)?;
            print!("{}", summary.report_text());
            Ok(())
        }
    }
}
