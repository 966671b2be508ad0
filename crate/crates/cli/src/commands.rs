//! Subcommand implementations. Each command reads its declared inputs,
//! writes its artifacts into a fresh run directory, checks them for
//! finiteness, and only then disarms the directory's cleanup guard.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use songlab_core::eval::{
    compare_reports, evaluate_policy, export_curves, export_distribution, load_report,
    save_report, training_log_csv, BucketReport, Scorer,
};
use songlab_core::model::{init_model, init_with_trunk, HeadKind, ModelHandle};
use songlab_core::prefdata::{
    build_dataset, load_samples, save_pairs, save_samples, save_stats, score_sample,
};
use songlab_core::seed::{child_seed, fnv1a_hash};
use songlab_core::task::{
    build_pretrain_corpus, gen_prompts, load_corpus, load_prompts, save_corpus, save_prompts,
    Prompt,
};
use songlab_core::trainers::{
    pretrain, rm_examples, run_trainer, train_reward_model, RewardSource, TrainOutcome,
    TrainerKind, TrainerSettings,
};

use crate::config::{RewardSourceSection, RunConfig};
use crate::rundir::RunDir;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out_root: PathBuf,
}

impl Ctx {
    fn rundir(&self, command: &str) -> Result<RunDir> {
        RunDir::create(&self.out_root, command, &self.cfg)
    }
}

/// An unscored generation, the `sample` command's row format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSample {
    prompt_id: String,
    sample_index: usize,
    tokens: Vec<u32>,
}

fn save_raw_samples(path: &Path, rows: &[RawSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_raw_samples(path: &Path) -> Result<Vec<RawSample>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut rows = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

fn load_lm(path: &Path) -> Result<ModelHandle> {
    let m = ModelHandle::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if m.config.head_kind != HeadKind::Lm {
        bail!("{} is not a language model checkpoint", path.display());
    }
    Ok(m)
}

fn load_prompts_ctx(path: &Path) -> Result<Vec<Prompt>> {
    load_prompts(path).with_context(|| format!("loading prompts {}", path.display()))
}

fn ensure_finite(name: &str, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    for x in xs {
        if !x.is_finite() {
            bail!("artifact check failed: non-finite value in {name}");
        }
    }
    Ok(())
}

fn report_values(rep: &BucketReport) -> [f64; 5] {
    [rep.mean_reward, rep.frac_low, rep.frac_mid, rep.frac_high, rep.halluc_rate]
}

// ---------------------------------------------------------------------------
// gen-data

pub fn gen_data(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let seed = cfg.seed;
    let corpus = build_pretrain_corpus(
        cfg.task.corpus_prompts,
        &cfg.task.corruption,
        child_seed(seed, "gen-corpus", 0),
    )?;
    let train = gen_prompts(cfg.task.train_prompts, child_seed(seed, "gen-train", 0))?;
    let val = gen_prompts(cfg.task.val_prompts, child_seed(seed, "gen-val", 0))?;

    for t in &train {
        if val.iter().any(|v| v.lyric == t.lyric) {
            bail!("training and validation prompts overlap; change the seed");
        }
    }

    let rd = ctx.rundir("gen-data")?;
    save_corpus(&rd.file("corpus.jsonl"), &corpus)?;
    save_prompts(&rd.file("train_prompts.jsonl"), &train)?;
    save_prompts(&rd.file("val_prompts.jsonl"), &val)?;
    std::fs::write(rd.file("corpus_stats.json"), serde_json::to_string_pretty(&corpus.stats)?)?;
    println!(
        "corpus {} rows ({} clean), {} train prompts, {} val prompts",
        corpus.stats.n_rows,
        corpus.stats.n_clean,
        train.len(),
        val.len()
    );
    Ok(rd.keep())
}

// ---------------------------------------------------------------------------
// pretrain

pub fn cmd_pretrain(ctx: &Ctx, corpus_path: &Path, val_path: &Path) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let corpus = load_corpus(corpus_path)?;
    let val = load_prompts_ctx(val_path)?;
    let mut policy = init_model(&cfg.model.to_model_config(), child_seed(cfg.seed, "origin-init", 0))?;
    let log = pretrain(
        &mut policy,
        &corpus,
        &cfg.trainer.pretrain,
        &cfg.trainer.schedule,
        &val,
        child_seed(cfg.seed, "pretrain", 0),
    )?;
    let report = evaluate_policy(
        &policy,
        &val,
        &cfg.trainer.schedule.eval,
        &Scorer::GroundTruthPer,
        child_seed(cfg.seed, "final-eval", 0),
    )?
    .report;

    let rd = ctx.rundir("pretrain")?;
    policy.save(&rd.file("origin.ckpt"))?;
    std::fs::write(rd.file("training_log.csv"), training_log_csv(&log))?;
    export_curves(&log, rd.path(), "curves")?;
    save_report(&report, &rd.file("report.json"))?;
    ensure_finite("training_log.csv", log.iter().filter_map(|r| r.loss))?;
    ensure_finite("report.json", report_values(&report))?;
    println!(
        "pretrained {} steps, final loss {:.4}, val mean reward {:.3}, frac_low {:.3}",
        log.len(),
        log.last().and_then(|r| r.loss).unwrap_or(f64::NAN),
        report.mean_reward,
        report.frac_low
    );
    Ok(rd.keep())
}

// ---------------------------------------------------------------------------
// sample / score / pair

pub fn cmd_sample(ctx: &Ctx, policy_path: &Path, prompts_path: &Path) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let policy = load_lm(policy_path)?;
    let prompts = load_prompts_ctx(prompts_path)?;
    let group = cfg.pairing.group_size;
    let mut rows = Vec::with_capacity(prompts.len() * group);
    for (i, p) in prompts.iter().enumerate() {
        for k in 0..group {
            let s = child_seed(cfg.seed, "pipeline-sample", (i * group + k) as u64);
            let tokens =
                policy.sample_sequence(&p.tokens(), cfg.task.max_gen_len, cfg.task.temperature, s)?;
            rows.push(RawSample { prompt_id: p.prompt_id.clone(), sample_index: k, tokens });
        }
    }
    let rd = ctx.rundir("sample")?;
    save_raw_samples(&rd.file("raw_samples.jsonl"), &rows)?;
    println!("sampled {} generations ({} prompts x {group})", rows.len(), prompts.len());
    Ok(rd.keep())
}

pub fn cmd_score(ctx: &Ctx, samples_path: &Path, prompts_path: &Path) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let raw = load_raw_samples(samples_path)?;
    if raw.is_empty() {
        bail!("no samples in {}", samples_path.display());
    }
    let prompts = load_prompts_ctx(prompts_path)?;
    let th = cfg.pairing.thresholds();
    let mut scored = Vec::with_capacity(raw.len());
    for row in raw {
        let p = prompts
            .iter()
            .find(|p| p.prompt_id == row.prompt_id)
            .ok_or_else(|| anyhow!("sample references unknown prompt {}", row.prompt_id))?;
        let key = format!("{}-{}", row.prompt_id, row.sample_index);
        let noise_seed = child_seed(cfg.seed, "pipeline-noise", fnv1a_hash(key.as_bytes()));
        scored.push(score_sample(
            p,
            row.sample_index,
            row.tokens,
            cfg.task.noise_rate,
            noise_seed,
            &th,
        )?);
    }
    let rd = ctx.rundir("score")?;
    save_samples(&rd.file("samples.jsonl"), &scored)?;
    export_distribution(&scored, &rd.file("distribution.csv"))?;
    ensure_finite("samples.jsonl", scored.iter().map(|s| s.reward))?;
    let mean = scored.iter().map(|s| s.reward).sum::<f64>() / scored.len() as f64;
    let halluc = scored.iter().filter(|s| s.hallucinated).count();
    println!("scored {} samples, mean reward {mean:.3}, {halluc} hallucinated", scored.len());
    Ok(rd.keep())
}

pub fn cmd_pair(ctx: &Ctx, samples_path: &Path) -> Result<PathBuf> {
    let samples = load_samples(samples_path)?;
    let ds = build_dataset(&samples, &ctx.cfg.pairing)?;
    let rd = ctx.rundir("pair")?;
    save_pairs(&rd.file("pairs.jsonl"), &ds.pairs)?;
    save_stats(&rd.file("pair_stats.json"), &ds.stats)?;
    println!(
        "{} pairs from {} groups (err-diff {}, fallback {}, halluc-cross {})",
        ds.pairs.len(),
        ds.stats.n_groups,
        ds.stats.pairs_err_diff,
        ds.stats.pairs_minmax_fallback,
        ds.stats.pairs_halluc_cross
    );
    Ok(rd.keep())
}

// ---------------------------------------------------------------------------
// train-rm

pub fn cmd_train_rm(
    ctx: &Ctx,
    samples_path: &Path,
    prompts_path: &Path,
    origin_path: Option<&Path>,
) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let samples = load_samples(samples_path)?;
    let prompts = load_prompts_ctx(prompts_path)?;
    let examples = rm_examples(&prompts, &samples)?;

    // Deterministic 80/20 split by example index.
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, ex) in examples.into_iter().enumerate() {
        if i % 5 == 4 {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    if val.is_empty() {
        bail!("too few samples to hold out a validation split");
    }

    let init = match origin_path {
        Some(p) => init_with_trunk(&load_lm(p)?, HeadKind::Reward, child_seed(cfg.seed, "rm-init", 0))?,
        None => {
            let mut mc = cfg.model.to_model_config();
            mc.head_kind = HeadKind::Reward;
            init_model(&mc, child_seed(cfg.seed, "rm-init", 0))?
        }
    };
    let out = train_reward_model(&init, &train, &val, &cfg.trainer.rm, child_seed(cfg.seed, "rm", 0))?;

    let rd = ctx.rundir("train-rm")?;
    out.best.save(&rd.file("rm.ckpt"))?;
    let mut csv = String::from("step,loss,validation_l1\n");
    for row in &out.log {
        let loss = if row.loss.is_finite() { row.loss.to_string() } else { String::new() };
        let l1 = row.val_l1.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", row.step, loss, l1));
    }
    std::fs::write(rd.file("rm_log.csv"), csv)?;
    ensure_finite("rm_log.csv", out.log.iter().filter_map(|r| r.val_l1))?;
    ensure_finite("rm best L1", [out.best_val_l1])?;
    println!(
        "reward model: best validation L1 {:.4} at step {} ({} train / {} held out)",
        out.best_val_l1,
        out.best_step,
        train.len(),
        val.len()
    );
    if let Some(msg) = &out.aborted {
        rd.keep();
        bail!("reward model training aborted: {msg}");
    }
    Ok(rd.keep())
}

// ---------------------------------------------------------------------------
// train

pub struct TrainInputs<'a> {
    pub origin: &'a Path,
    pub train_prompts: &'a Path,
    pub val_prompts: &'a Path,
    pub samples: Option<&'a Path>,
    pub pairs: Option<&'a Path>,
    pub rm: Option<&'a Path>,
}

pub fn cmd_train(ctx: &Ctx, kind: TrainerKind, io: &TrainInputs<'_>) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let origin = load_lm(io.origin)?;
    let train = load_prompts_ctx(io.train_prompts)?;
    let val = load_prompts_ctx(io.val_prompts)?;

    let offpolicy = match kind {
        TrainerKind::Rs | TrainerKind::Dpo | TrainerKind::RsThenDpo => {
            let samples_path = io
                .samples
                .ok_or_else(|| anyhow!("trainer {kind} needs --samples from the score step"))?;
            let pairs_path =
                io.pairs.ok_or_else(|| anyhow!("trainer {kind} needs --pairs from the pair step"))?;
            Some((load_samples(samples_path)?, songlab_core::prefdata::load_pairs(pairs_path)?))
        }
        TrainerKind::Ppo | TrainerKind::Grpo => None,
    };

    let rm_model = match (kind, cfg.reward_source) {
        (TrainerKind::Ppo | TrainerKind::Grpo, RewardSourceSection::RewardModel) => {
            let path = io.rm.ok_or_else(|| {
                anyhow!("trainer {kind} with a reward-model source needs --rm from train-rm")
            })?;
            Some(ModelHandle::load(path)?)
        }
        _ => None,
    };
    let reward = match (&rm_model, cfg.reward_source) {
        (Some(rm), _) => RewardSource::RewardModel(rm),
        (None, RewardSourceSection::GroundTruthPer { noise_rate }) => {
            RewardSource::GroundTruthPer { noise_rate }
        }
        (None, RewardSourceSection::RewardModel) => RewardSource::GroundTruthPer { noise_rate: 0.0 },
    };

    let outcome = run_trainer(
        kind,
        &cfg.trainer,
        &origin,
        &train,
        &val,
        offpolicy
            .as_ref()
            .map(|(s, p)| songlab_core::trainers::OffPolicyData { samples: s, pairs: p })
            .as_ref(),
        &reward,
        child_seed(cfg.seed, "train", 0),
    )?;

    let report = evaluate_policy(
        &outcome.best,
        &val,
        &cfg.trainer.schedule.eval,
        &Scorer::GroundTruthPer,
        child_seed(cfg.seed, "final-eval", 0),
    )?
    .report;

    let rd = ctx.rundir(&format!("train-{kind}"))?;
    write_outcome(&rd, &outcome, &report)?;
    println!(
        "{kind}: best val reward {:.3} at step {}, final step {}, frac_low {:.3}",
        outcome.best_val_reward, outcome.best_step, outcome.final_step, report.frac_low
    );
    if let Some(msg) = &outcome.aborted {
        rd.keep();
        bail!("training aborted at step {}: {msg}", outcome.final_step);
    }
    Ok(rd.keep())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_step: usize,
    best_val_reward: f64,
    final_step: usize,
    aborted: &'a Option<String>,
}

fn write_outcome(rd: &RunDir, outcome: &TrainOutcome, report: &BucketReport) -> Result<()> {
    outcome.best.save(&rd.file("trained.ckpt"))?;
    std::fs::write(rd.file("training_log.csv"), training_log_csv(&outcome.log))?;
    export_curves(&outcome.log, rd.path(), "curves")?;
    save_report(report, &rd.file("report.json"))?;
    let summary = TrainSummary {
        best_step: outcome.best_step,
        best_val_reward: outcome.best_val_reward,
        final_step: outcome.final_step,
        aborted: &outcome.aborted,
    };
    std::fs::write(rd.file("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    ensure_finite("training_log.csv", outcome.log.iter().filter_map(|r| r.loss))?;
    ensure_finite("report.json", report_values(report))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / report

pub fn cmd_eval(
    ctx: &Ctx,
    policy_path: &Path,
    prompts_path: &Path,
    scorer_name: &str,
    rm_path: Option<&Path>,
) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let policy = load_lm(policy_path)?;
    let prompts = load_prompts_ctx(prompts_path)?;
    let rm_model = match scorer_name {
        "ground-truth-per" => None,
        "reward-model" => Some(ModelHandle::load(
            rm_path.ok_or_else(|| anyhow!("scorer reward-model needs --rm"))?,
        )?),
        other => bail!("unknown scorer {other:?}; expected ground-truth-per|reward-model"),
    };
    let scorer = match &rm_model {
        Some(rm) => Scorer::RewardModel(rm),
        None => Scorer::GroundTruthPer,
    };
    let out = evaluate_policy(
        &policy,
        &prompts,
        &cfg.trainer.schedule.eval,
        &scorer,
        child_seed(cfg.seed, "eval-cmd", 0),
    )?;

    let rd = ctx.rundir("eval")?;
    save_report(&out.report, &rd.file("report.json"))?;
    export_distribution(&out.records, &rd.file("distribution.csv"))?;
    ensure_finite("report.json", report_values(&out.report))?;
    println!(
        "mean reward {:.3}, buckets low/mid/high {:.3}/{:.3}/{:.3}, halluc rate {:.3} over {} samples",
        out.report.mean_reward,
        out.report.frac_low,
        out.report.frac_mid,
        out.report.frac_high,
        out.report.halluc_rate,
        out.report.n
    );
    Ok(rd.keep())
}

pub fn cmd_report(ctx: &Ctx, before_path: &Path, after_path: &Path) -> Result<PathBuf> {
    let before = load_report(before_path)?;
    let after = load_report(after_path)?;
    let deltas = compare_reports(&before, &after)?;
    let rd = ctx.rundir("report")?;
    std::fs::write(rd.file("deltas.json"), serde_json::to_string_pretty(&deltas)?)?;
    let pct = |r: Option<f64>| match r {
        Some(r) => format!("{:+.2}%", 100.0 * r),
        None => "n/a".to_string(),
    };
    println!(
        "mean reward {:.3} -> {:.3} ({}), frac_low {:.3} -> {:.3} ({:+.2} points)",
        deltas.mean_reward.before,
        deltas.mean_reward.after,
        pct(deltas.mean_reward.relative),
        deltas.frac_low.before,
        deltas.frac_low.after,
        100.0 * deltas.frac_low.absolute
    );
    Ok(rd.keep())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepGrid {
    Ppo,
    Grpo,
    Both,
}

impl std::str::FromStr for SweepGrid {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(SweepGrid::Ppo),
            "grpo" => Ok(SweepGrid::Grpo),
            "both" => Ok(SweepGrid::Both),
            other => bail!("unknown grid {other:?}; expected ppo|grpo|both"),
        }
    }
}

struct SweepRow {
    cell: String,
    best_val: f64,
    final_val: f64,
    best_step: usize,
}

pub fn cmd_sweep(ctx: &Ctx, grid: SweepGrid, io: &TrainInputs<'_>) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let origin = load_lm(io.origin)?;
    let train = load_prompts_ctx(io.train_prompts)?;
    let val = load_prompts_ctx(io.val_prompts)?;
    let rm_model = match (grid, cfg.reward_source) {
        (_, RewardSourceSection::GroundTruthPer { .. }) => None,
        _ => {
            let path = io.rm.ok_or_else(|| {
                anyhow!("sweep with a reward-model source needs --rm from train-rm")
            })?;
            Some(ModelHandle::load(path)?)
        }
    };
    let reward = match (&rm_model, cfg.reward_source) {
        (Some(rm), _) => RewardSource::RewardModel(rm),
        (None, RewardSourceSection::GroundTruthPer { noise_rate }) => {
            RewardSource::GroundTruthPer { noise_rate }
        }
        (None, RewardSourceSection::RewardModel) => unreachable!("checked above"),
    };

    let mut cells: Vec<(String, TrainerKind, TrainerSettings)> = Vec::new();
    if grid != SweepGrid::Grpo {
        for &alpha in &[0.0, 0.0005] {
            for &lambda in &[0.99, 1.0] {
                for &entropy in &[0.0, 0.01] {
                    let mut s = cfg.trainer.clone();
                    s.ppo.alpha = alpha;
                    s.ppo.lambda = lambda;
                    s.ppo.entropy_weight = entropy;
                    let cell = format!("ppo_alpha{alpha}_lambda{lambda}_entropy{entropy}");
                    cells.push((cell, TrainerKind::Ppo, s));
                }
            }
        }
    }
    if grid != SweepGrid::Ppo {
        for &token_level in &[false, true] {
            let mut s = cfg.trainer.clone();
            s.grpo.token_level_loss = token_level;
            let level = if token_level { "token" } else { "sequence" };
            cells.push((format!("grpo_{level}"), TrainerKind::Grpo, s));
        }
    }

    let rd = ctx.rundir("sweep")?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, (cell, kind, settings)) in cells.iter().enumerate() {
        let outcome = run_trainer(
            *kind,
            settings,
            &origin,
            &train,
            &val,
            None,
            &reward,
            child_seed(cfg.seed, "sweep-cell", i as u64),
        )?;
        std::fs::write(rd.file(&format!("{cell}.csv")), training_log_csv(&outcome.log))?;
        let final_val = outcome
            .log
            .iter()
            .rev()
            .find_map(|r| r.mean_validation_reward)
            .unwrap_or(f64::NAN);
        println!(
            "{cell}: best {:.3} at step {}, final {:.3}{}",
            outcome.best_val_reward,
            outcome.best_step,
            final_val,
            outcome.aborted.as_deref().map(|m| format!(" (aborted: {m})")).unwrap_or_default()
        );
        rows.push(SweepRow {
            cell: cell.clone(),
            best_val: outcome.best_val_reward,
            final_val,
            best_step: outcome.best_step,
        });
    }

    let mut csv = String::from("cell,best_val_reward,final_val_reward,best_step\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.cell, r.best_val, r.final_val, r.best_step));
    }
    std::fs::write(rd.file("summary.csv"), csv)?;
    ensure_finite("summary.csv", rows.iter().flat_map(|r| [r.best_val, r.final_val]))?;
    Ok(rd.keep())
}
