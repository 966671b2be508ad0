//! `songlab`: the lyric-to-song preference lab, end to end.
//!
//! The pipeline in order: gen-data, pretrain, sample, score, pair,
//! train-rm, train <kind>, eval, report. `sweep` runs the PPO ablation
//! grid and the GRPO loss-granularity comparison.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Result;
use clap::{Parser, Subcommand};

use songlab_core::trainers::TrainerKind;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "songlab", version, about = "Lyric-to-song preference optimization lab")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root override (beats SONGLAB_OUT and the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining corpus and disjoint train/val prompt sets.
    GenData,
    /// Train the Origin policy on the corruption corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Sample a group of generations per prompt.
    Sample {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Score raw samples: decode, noise channel, align, classify.
    Score {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Build preference pairs from scored samples.
    Pair {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Train the reward model on scored samples.
    TrainRm {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Warm-start the trunk from this policy checkpoint.
        #[arg(long)]
        origin: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Train a policy: rs, dpo, rs+dpo, ppo, or grpo.
    Train {
        kind: String,
        #[arg(long)]
        origin: PathBuf,
        #[arg(long)]
        train_prompts: PathBuf,
        #[arg(long)]
        val_prompts: PathBuf,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a policy on a prompt set.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value = "ground-truth-per")]
        scorer: String,
        #[arg(long)]
        rm: Option<PathBuf>,
    },
    /// Compare two evaluation reports.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// Run the PPO ablation grid and the GRPO granularity comparison.
    Sweep {
        #[arg(long)]
        origin: PathBuf,
        #[arg(long)]
        train_prompts: PathBuf,
        #[arg(long)]
        val_prompts: PathBuf,
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        grid: String,
        #[arg(long)]
        max_steps: Option<usize>,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Pretrain { max_steps: Some(n), .. } => cfg.trainer.pretrain.max_steps = *n,
        Command::TrainRm { max_steps: Some(n), .. } => cfg.trainer.rm.max_steps = *n,
        Command::Train { kind, max_steps: Some(n), .. } => {
            match TrainerKind::from_str(kind)? {
                TrainerKind::Rs => cfg.trainer.rs.max_steps = *n,
                TrainerKind::Dpo => cfg.trainer.dpo.max_steps = *n,
                TrainerKind::RsThenDpo => {
                    cfg.trainer.rs.max_steps = *n;
                    cfg.trainer.dpo.max_steps = *n;
                }
                TrainerKind::Ppo => cfg.trainer.ppo.max_steps = *n,
                TrainerKind::Grpo => cfg.trainer.grpo.max_steps = *n,
            }
        }
        Command::Sweep { max_steps: Some(n), .. } => {
            cfg.trainer.ppo.max_steps = *n;
            cfg.trainer.grpo.max_steps = *n;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let out_root = rundir::resolve_out_root(cli.out.as_deref(), &cfg);
    let ctx = commands::Ctx { cfg, out_root };

    let kept = match &cli.command {
        Command::GenData => commands::gen_data(&ctx)?,
        Command::Pretrain { corpus, val, .. } => commands::cmd_pretrain(&ctx, corpus, val)?,
        Command::Sample { policy, prompts } => commands::cmd_sample(&ctx, policy, prompts)?,
        Command::Score { samples, prompts } => commands::cmd_score(&ctx, samples, prompts)?,
        Command::Pair { samples } => commands::cmd_pair(&ctx, samples)?,
        Command::TrainRm { samples, prompts, origin, .. } => {
            commands::cmd_train_rm(&ctx, samples, prompts, origin.as_deref())?
        }
        Command::Train { kind, origin, train_prompts, val_prompts, samples, pairs, rm, .. } => {
            let io = commands::TrainInputs {
                origin,
                train_prompts,
                val_prompts,
                samples: samples.as_deref(),
                pairs: pairs.as_deref(),
                rm: rm.as_deref(),
            };
            commands::cmd_train(&ctx, TrainerKind::from_str(kind)?, &io)?
        }
        Command::Eval { policy, prompts, scorer, rm } => {
            commands::cmd_eval(&ctx, policy, prompts, scorer, rm.as_deref())?
        }
        Command::Report { before, after } => commands::cmd_report(&ctx, before, after)?,
        Command::Sweep { origin, train_prompts, val_prompts, rm, grid, .. } => {
            let io = commands::TrainInputs {
                origin,
                train_prompts,
                val_prompts,
                samples: None,
                pairs: None,
                rm: rm.as_deref(),
            };
            commands::cmd_sweep(&ctx, commands::SweepGrid::from_str(grid)?, &io)?
        }
    };
    println!("artifacts: {}", kept.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
