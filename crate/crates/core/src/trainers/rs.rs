//! Supervised fine-tuning steps: pretraining on the corruption corpus and
//! rejection-sampling training on the chosen sides of preference pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{token_logprobs_tape, ModelHandle, Role};
use crate::numcore::{Adam, AdamConfig};
use crate::seed::{child_seed, stream_rng};
use crate::task::{CorpusDataset, Prompt};

use super::{
    chosen_examples, validate_policy, BestTracker, OffPolicyData, ScheduleConfig, SeqExample,
    TrainLogRow, TrainOutcome, TrainerSettings,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsConfig {
    /// Scaled x100 from the full-scale 5e-7 to fit the desk model.
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
}

impl Default for RsConfig {
    fn default() -> Self {
        RsConfig { lr: 5e-5, batch: 16, max_steps: 400 }
    }
}

/// Pretraining runs hotter than the RL phases; it only has to produce a
/// competent starting policy, not preserve one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { lr: 1.5e-3, batch: 16, max_steps: 1200 }
    }
}

/// One supervised step: mean negative log-likelihood over every target
/// token in the batch, then one optimizer update.
pub fn rs_step(policy: &mut ModelHandle, batch: &[SeqExample], adam: &mut Adam) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Batch("empty supervised batch".into()));
    }
    let total_tokens: usize = batch.iter().map(|ex| ex.target.len()).sum();
    if total_tokens == 0 {
        return Err(Error::Batch("supervised batch has no target tokens".into()));
    }
    let w = 1.0 / total_tokens as f64;
    let cfg = policy.config.clone();
    policy.params.zero_grad();
    let mut loss = 0.0;
    for ex in batch {
        loss += policy.params.eval_with_gradients(|t, b| {
            let lps = token_logprobs_tape(t, b, &cfg, &ex.prompt, &ex.target)?;
            let s = t.sum_all(lps);
            Ok(t.scale(s, -w))
        })?;
    }
    adam.step(&mut policy.params);
    Ok(loss)
}

fn next_batch(
    examples: &[SeqExample],
    order: &mut Vec<usize>,
    cursor: &mut usize,
    rng: &mut impl rand::Rng,
    size: usize,
) -> Vec<SeqExample> {
    let mut batch = Vec::with_capacity(size);
    for _ in 0..size {
        if *cursor == order.len() {
            *cursor = 0;
            order.shuffle(rng);
        }
        batch.push(examples[order[*cursor]].clone());
        *cursor += 1;
    }
    batch
}

/// Trains a fresh policy on the corruption corpus for a fixed number of
/// steps, logging validation snapshots along the way. Mutates in place.
/// Hold the peak rate while the copy circuit forms, then cosine down to a
/// tenth of it: the late-stage loss plateau is optimizer noise, not a floor,
/// and only shrinks once the rate does.
fn pretrain_lr(peak: f64, step: usize, max_steps: usize) -> f64 {
    let hold = max_steps * 3 / 5;
    if step <= hold {
        return peak;
    }
    let frac = (step - hold) as f64 / (max_steps - hold) as f64;
    let floor = 0.1 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn pretrain(
    policy: &mut ModelHandle,
    corpus: &CorpusDataset,
    cfg: &PretrainConfig,
    sched: &ScheduleConfig,
    val_prompts: &[Prompt],
    seed: u64,
) -> Result<Vec<TrainLogRow>> {
    if corpus.rows.is_empty() {
        return Err(Error::Batch("empty pretrain corpus".into()));
    }
    let examples: Vec<SeqExample> = corpus
        .rows
        .iter()
        .map(|r| SeqExample { prompt: r.prompt.tokens(), target: r.tokens.clone() })
        .collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &policy.params);
    let mut rng = stream_rng(child_seed(seed, "pretrain-shuffle", 0), "pretrain", 0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        adam.cfg.lr = pretrain_lr(cfg.lr, step, cfg.max_steps);
        let batch = next_batch(&examples, &mut order, &mut cursor, &mut rng, cfg.batch);
        let loss = rs_step(policy, &batch, &mut adam)?;
        let mut row = TrainLogRow::at(step, Some(loss));
        if !val_prompts.is_empty() && step % sched.validate_every == 0 {
            let rep = validate_policy(policy, val_prompts, sched, seed)?;
            row.set_validation(&rep);
        }
        log.push(row);
    }
    Ok(log)
}

pub(super) fn run_rs(
    settings: &TrainerSettings,
    origin: &ModelHandle,
    train_prompts: &[Prompt],
    val_prompts: &[Prompt],
    data: &OffPolicyData<'_>,
    seed: u64,
    step_offset: usize,
) -> Result<TrainOutcome> {
    let cfg = &settings.rs;
    let sched = &settings.schedule;
    let examples = chosen_examples(train_prompts, data.samples, data.pairs)?;

    let mut policy = origin.clone();
    policy.role = Role::Policy;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &policy.params);
    let mut tracker = BestTracker::new(&policy.params);
    let mut log = Vec::new();

    let baseline = validate_policy(&policy, val_prompts, sched, seed)?;
    tracker.observe(step_offset, baseline.mean_reward, &policy.params);
    let mut row = TrainLogRow::at(step_offset, None);
    row.set_validation(&baseline);
    log.push(row);

    let mut rng = stream_rng(child_seed(seed, "rs-shuffle", 0), "rs", 0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut aborted = None;
    let mut step = step_offset;
    for local in 1..=cfg.max_steps {
        step = step_offset + local;
        let batch = next_batch(&examples, &mut order, &mut cursor, &mut rng, cfg.batch);
        let loss = match rs_step(&mut policy, &batch, &mut adam) {
            Ok(l) => l,
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut row = TrainLogRow::at(step, Some(loss));
        if local % sched.validate_every == 0 {
            let rep = validate_policy(&policy, val_prompts, sched, seed)?;
            tracker.observe(step, rep.mean_reward, &policy.params);
            row.set_validation(&rep);
            log.push(row);
            if tracker.exhausted(sched.patience) {
                break;
            }
        } else {
            log.push(row);
        }
    }
    Ok(tracker.into_outcome(&origin.config, log, step, aborted))
}
