//! Direct preference optimization against a frozen reference policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{token_logprobs_tape, ModelHandle, Role};
use crate::numcore::{softplus, Adam, AdamConfig};
use crate::seed::{child_seed, stream_rng};
use crate::task::{Prompt, TokenSeq};

use rand::seq::SliceRandom;

use super::{
    pair_examples, validate_policy, BestTracker, OffPolicyData, TrainLogRow, TrainOutcome,
    TrainerSettings,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    /// Scaled x100 from the full-scale 5e-7 to fit the desk model.
    pub lr: f64,
    pub batch_pairs: usize,
    pub max_steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.3, lr: 5e-5, batch_pairs: 3, max_steps: 600 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta {} must be > 0", self.beta)));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// One preference pair in token form.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

fn seq_logprob_sum(h: &ModelHandle, prompt: &[u32], cont: &[u32]) -> Result<f64> {
    Ok(h.sequence_logprobs(prompt, cont)?.iter().sum())
}

/// The loss as a function of the policy-vs-reference log-ratio margin d:
/// -log sigma(beta * d), written through the stable softplus.
pub fn dpo_loss_from_margin(d: f64, beta: f64) -> f64 {
    softplus(-beta * d)
}

/// Full loss for one pair, evaluated without touching any gradients.
pub fn dpo_loss(
    policy: &ModelHandle,
    reference: &ModelHandle,
    pair: &PairExample,
    beta: f64,
) -> Result<f64> {
    let cw = seq_logprob_sum(policy, &pair.prompt, &pair.chosen)?;
    let cl = seq_logprob_sum(policy, &pair.prompt, &pair.rejected)?;
    let rw = seq_logprob_sum(reference, &pair.prompt, &pair.chosen)?;
    let rl = seq_logprob_sum(reference, &pair.prompt, &pair.rejected)?;
    Ok(dpo_loss_from_margin((cw - rw) - (cl - rl), beta))
}

#[derive(Debug, Clone, Copy)]
pub struct DpoStepInfo {
    pub loss: f64,
    /// Mean policy-vs-reference margin over the batch, before the update.
    pub mean_margin: f64,
}

/// One optimizer step on a batch of pairs; loss is averaged over pairs.
pub fn dpo_step(
    policy: &mut ModelHandle,
    reference: &ModelHandle,
    batch: &[PairExample],
    cfg: &DpoConfig,
    adam: &mut Adam,
) -> Result<DpoStepInfo> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Batch("empty pair batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mcfg = policy.config.clone();
    policy.params.zero_grad();
    let mut loss = 0.0;
    let mut margin_total = 0.0;
    for pair in batch {
        let ref_margin = seq_logprob_sum(reference, &pair.prompt, &pair.chosen)?
            - seq_logprob_sum(reference, &pair.prompt, &pair.rejected)?;
        let mut pol_margin = 0.0;
        loss += policy.params.eval_with_gradients(|t, b| {
            let clps = token_logprobs_tape(t, b, &mcfg, &pair.prompt, &pair.chosen)?;
            let rlps = token_logprobs_tape(t, b, &mcfg, &pair.prompt, &pair.rejected)?;
            let cs = t.sum_all(clps);
            let rs = t.sum_all(rlps);
            let m = t.sub(cs, rs);
            pol_margin = t.value(m).item();
            let d = t.add_const(m, -ref_margin);
            let scaled = t.scale(d, -cfg.beta);
            let sp = t.softplus(scaled);
            Ok(t.scale(sp, w))
        })?;
        margin_total += pol_margin - ref_margin;
    }
    adam.step(&mut policy.params);
    Ok(DpoStepInfo { loss, mean_margin: margin_total * w })
}

/// Policy log-probability sums over a fixed probe set of pairs, for the
/// chosen/rejected trajectory columns of the training log.
pub fn dpo_margin_probe(policy: &ModelHandle, probe: &[PairExample]) -> Result<(f64, f64)> {
    let mut chosen = 0.0;
    let mut rejected = 0.0;
    for pair in probe {
        chosen += seq_logprob_sum(policy, &pair.prompt, &pair.chosen)?;
        rejected += seq_logprob_sum(policy, &pair.prompt, &pair.rejected)?;
    }
    Ok((chosen, rejected))
}

pub(super) fn run_dpo(
    settings: &TrainerSettings,
    origin: &ModelHandle,
    train_prompts: &[Prompt],
    val_prompts: &[Prompt],
    data: &OffPolicyData<'_>,
    seed: u64,
    step_offset: usize,
) -> Result<TrainOutcome> {
    let cfg = &settings.dpo;
    cfg.validate()?;
    let sched = &settings.schedule;
    let examples = pair_examples(train_prompts, data.samples, data.pairs)?;
    let probe: Vec<PairExample> = examples.iter().take(8).cloned().collect();

    let mut policy = origin.clone();
    policy.role = Role::Policy;
    let reference = origin.clone_frozen(Role::Reference);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &policy.params);
    let mut tracker = BestTracker::new(&policy.params);
    let mut log = Vec::new();

    let baseline = validate_policy(&policy, val_prompts, sched, seed)?;
    tracker.observe(step_offset, baseline.mean_reward, &policy.params);
    let mut row = TrainLogRow::at(step_offset, None);
    row.set_validation(&baseline);
    let (c0, r0) = dpo_margin_probe(&policy, &probe)?;
    row.chosen_logprob_sum = Some(c0);
    row.rejected_logprob_sum = Some(r0);
    log.push(row);

    let mut rng = stream_rng(child_seed(seed, "dpo-shuffle", 0), "dpo", 0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut aborted = None;
    let mut step = step_offset;
    for local in 1..=cfg.max_steps {
        step = step_offset + local;
        let mut batch = Vec::with_capacity(cfg.batch_pairs);
        for _ in 0..cfg.batch_pairs {
            if cursor == order.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let info = match dpo_step(&mut policy, &reference, &batch, cfg, &mut adam) {
            Ok(i) => i,
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut row = TrainLogRow::at(step, Some(info.loss));
        if local % sched.margin_probe_every == 0 {
            let (c, r) = dpo_margin_probe(&policy, &probe)?;
            row.chosen_logprob_sum = Some(c);
            row.rejected_logprob_sum = Some(r);
        }
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
