//! Clipped-surrogate policy optimization with a learned critic and
//! KL-shaped per-token rewards.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    init_with_trunk, token_logprobs_tape, value_estimates_tape, HeadKind, ModelConfig,
    ModelHandle, Role,
};
use crate::numcore::{Adam, AdamConfig, Tape, Tensor, VarId};
use crate::phoneme::HallucinationThresholds;
use crate::seed::{child_seed, stream_rng};
use crate::task::{Prompt, TokenSeq};

use super::{
    validate_policy, BestTracker, RewardSource, ScheduleConfig, TrainLogRow, TrainOutcome,
    TrainerSettings,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Weight of the per-token reference-KL reward shaping.
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Clip width for the probability ratio.
    pub epsilon: f64,
    pub entropy_weight: f64,
    /// Update epochs per rollout batch (K).
    pub epochs_per_batch: usize,
    /// Rollouts collected per batch.
    pub batch: usize,
    /// Scaled x100 from the full-scale 5e-7 to fit the desk model.
    pub lr: f64,
    pub critic_lr: f64,
    pub max_steps: usize,
    /// Debug mode: take the ratio as a quotient of log-probs instead of
    /// the probability ratio. Ill-behaved near logprob 0; off by default.
    pub ratio_log_quotient: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            alpha: 0.0005,
            gamma: 1.0,
            lambda: 1.0,
            epsilon: 0.2,
            entropy_weight: 0.0,
            epochs_per_batch: 4,
            batch: 16,
            lr: 5e-5,
            critic_lr: 1e-3,
            max_steps: 240,
            ratio_log_quotient: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0,1]", self.gamma)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda {} outside (0,1]", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0,1)", self.epsilon)));
        }
        if self.batch == 0 || self.epochs_per_batch == 0 {
            return Err(Error::Config("batch and epochs_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token rewards: the reference-KL shaping everywhere, plus the
/// terminal reward at the last position.
pub fn ppo_token_rewards(
    old_logprobs: &[f64],
    ref_logprobs: &[f64],
    terminal_r: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    if old_logprobs.len() != ref_logprobs.len() {
        return Err(Error::Shape(format!(
            "logprob lengths differ: {} vs {}",
            old_logprobs.len(),
            ref_logprobs.len()
        )));
    }
    if old_logprobs.is_empty() {
        return Err(Error::Shape("empty rollout".into()));
    }
    let mut r: Vec<f64> = old_logprobs
        .iter()
        .zip(ref_logprobs)
        .map(|(&pol, &rf)| alpha * (rf - pol))
        .collect();
    *r.last_mut().unwrap() += terminal_r;
    Ok(r)
}

/// TD errors, GAE advantages, and returns-to-go under the V(T+1) = 0
/// convention. At gamma = lambda = 1 the advantages telescope to the full
/// Monte Carlo return minus the value baseline.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "rewards {} vs values {}",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut deltas = vec![0.0; n];
    for t in 0..n {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        deltas[t] = rewards[t] + gamma * next_v - values[t];
    }
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        acc = deltas[t] + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns: Vec<f64> = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((deltas, advantages, returns))
}

#[derive(Debug, Clone)]
pub struct RolloutSample {
    pub prompt: TokenSeq,
    pub tokens: TokenSeq,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub terminal_reward: f64,
    pub rewards: Vec<f64>,
    pub td_errors: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (label, len) in [
            ("old_logprobs", self.old_logprobs.len()),
            ("ref_logprobs", self.ref_logprobs.len()),
            ("values", self.values.len()),
            ("rewards", self.rewards.len()),
            ("td_errors", self.td_errors.len()),
            ("advantages", self.advantages.len()),
            ("returns", self.returns.len()),
        ] {
            if len != n {
                return Err(Error::Shape(format!("{label} has {len} entries for {n} tokens")));
            }
        }
        if !self.advantages.iter().all(|a| a.is_finite()) {
            return Err(Error::Numerical("non-finite advantage in rollout".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub samples: Vec<RolloutSample>,
}

impl RolloutBatch {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Batch("empty rollout batch".into()));
        }
        self.samples.iter().try_for_each(RolloutSample::validate)
    }

    pub fn total_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Critic with the policy's trunk and a zero value head.
pub fn init_critic_from(policy: &ModelHandle, seed: u64) -> Result<ModelHandle> {
    init_with_trunk(policy, HeadKind::Value, seed)
}

/// Per-token surrogate column for one rollout: the negated clipped
/// objective, plus the entropy term when weighted.
fn sample_surrogate_tape(
    t: &mut Tape,
    b: &crate::numcore::Bound,
    mcfg: &ModelConfig,
    cfg: &PpoConfig,
    s: &RolloutSample,
) -> Result<VarId> {
    let n = s.tokens.len();
    let new_lps = token_logprobs_tape(t, b, mcfg, &s.prompt, &s.tokens)?;
    let old = t.constant(Tensor::from_vec(n, 1, s.old_logprobs.clone()));
    let ratio = if cfg.ratio_log_quotient {
        t.div(new_lps, old)
    } else {
        let diff = t.sub(new_lps, old);
        t.exp(diff)
    };
    if !t.value(ratio).all_finite() {
        return Err(Error::Numerical("non-finite policy ratio".into()));
    }
    let adv = t.constant(Tensor::from_vec(n, 1, s.advantages.clone()));
    let unclipped = t.mul(ratio, adv);
    let clipped_ratio = t.clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let clipped = t.mul(clipped_ratio, adv);
    let objective = t.min_elem(unclipped, clipped);
    let mut tok = t.neg(objective);
    if cfg.entropy_weight != 0.0 {
        let ent = t.scale(new_lps, -cfg.entropy_weight);
        tok = t.add(tok, ent);
    }
    Ok(tok)
}

/// Mean per-token loss over the whole batch, without gradients.
pub fn ppo_policy_loss(policy: &ModelHandle, batch: &RolloutBatch, cfg: &PpoConfig) -> Result<f64> {
    cfg.validate()?;
    batch.validate()?;
    let w = 1.0 / batch.total_tokens() as f64;
    let mcfg = policy.config.clone();
    let mut loss = 0.0;
    for s in &batch.samples {
        loss += policy.params.eval_value(|t, b| {
            let tok = sample_surrogate_tape(t, b, &mcfg, cfg, s)?;
            let total = t.sum_all(tok);
            Ok(t.scale(total, w))
        })?;
    }
    Ok(loss)
}

/// One optimizer step on the policy over the batch.
pub fn ppo_policy_step(
    policy: &mut ModelHandle,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    adam: &mut Adam,
) -> Result<f64> {
    cfg.validate()?;
    batch.validate()?;
    let w = 1.0 / batch.total_tokens() as f64;
    let mcfg = policy.config.clone();
    policy.params.zero_grad();
    let mut loss = 0.0;
    for s in &batch.samples {
        loss += policy.params.eval_with_gradients(|t, b| {
            let tok = sample_surrogate_tape(t, b, &mcfg, cfg, s)?;
            let total = t.sum_all(tok);
            Ok(t.scale(total, w))
        })?;
    }
    adam.step(&mut policy.params);
    Ok(loss)
}

/// Mean squared error of the critic's values against returns-to-go.
pub fn critic_loss(critic: &ModelHandle, batch: &RolloutBatch) -> Result<f64> {
    batch.validate()?;
    let w = 1.0 / batch.total_tokens() as f64;
    let mcfg = critic.config.clone();
    let mut loss = 0.0;
    for s in &batch.samples {
        loss += critic.params.eval_value(|t, b| {
            let v = value_estimates_tape(t, b, &mcfg, &s.prompt, &s.tokens)?;
            let ret = t.constant(Tensor::from_vec(s.tokens.len(), 1, s.returns.clone()));
            let diff = t.sub(v, ret);
            let sq = t.mul(diff, diff);
            let total = t.sum_all(sq);
            Ok(t.scale(total, w))
        })?;
    }
    Ok(loss)
}

pub fn critic_step(critic: &mut ModelHandle, batch: &RolloutBatch, adam: &mut Adam) -> Result<f64> {
    batch.validate()?;
    let w = 1.0 / batch.total_tokens() as f64;
    let mcfg = critic.config.clone();
    critic.params.zero_grad();
    let mut loss = 0.0;
    for s in &batch.samples {
        loss += critic.params.eval_with_gradients(|t, b| {
            let v = value_estimates_tape(t, b, &mcfg, &s.prompt, &s.tokens)?;
            let ret = t.constant(Tensor::from_vec(s.tokens.len(), 1, s.returns.clone()));
            let diff = t.sub(v, ret);
            let sq = t.mul(diff, diff);
            let total = t.sum_all(sq);
            Ok(t.scale(total, w))
        })?;
    }
    adam.step(&mut critic.params);
    Ok(loss)
}

/// Samples a rollout batch against frozen snapshots. Prompt picks are drawn
/// serially; the rollouts themselves run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    old: &ModelHandle,
    reference: &ModelHandle,
    critic: &ModelHandle,
    prompts: &[Prompt],
    reward: &RewardSource<'_>,
    cfg: &PpoConfig,
    sched: &ScheduleConfig,
    seed: u64,
    round: usize,
) -> Result<RolloutBatch> {
    if prompts.is_empty() {
        return Err(Error::Batch("no training prompts".into()));
    }
    let mut rng = stream_rng(child_seed(seed, "ppo-prompts", round as u64), "ppo", 0);
    let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..prompts.len())).collect();
    let th = HallucinationThresholds::toy();
    let samples: Result<Vec<RolloutSample>> = picks
        .par_iter()
        .enumerate()
        .map(|(b, &pi)| {
            let p = &prompts[pi];
            let k = (round * cfg.batch + b) as u64;
            let tokens = old.sample_sequence(
                &p.tokens(),
                sched.eval.max_gen_len,
                sched.eval.temperature,
                child_seed(seed, "ppo-rollout", k),
            )?;
            let terminal = reward.terminal_reward(p, &tokens, &th, child_seed(seed, "ppo-noise", k))?;
            let prompt_tokens = p.tokens();
            let old_logprobs = old.sequence_logprobs(&prompt_tokens, &tokens)?;
            let ref_logprobs = reference.sequence_logprobs(&prompt_tokens, &tokens)?;
            let values = critic.value_estimates(&prompt_tokens, &tokens)?;
            let rewards = ppo_token_rewards(&old_logprobs, &ref_logprobs, terminal, cfg.alpha)?;
            let (td_errors, advantages, returns) =
                compute_advantages(&rewards, &values, cfg.gamma, cfg.lambda)?;
            let s = RolloutSample {
                prompt: prompt_tokens,
                tokens,
                old_logprobs,
                ref_logprobs,
                values,
                terminal_reward: terminal,
                rewards,
                td_errors,
                advantages,
                returns,
            };
            s.validate()?;
            Ok(s)
        })
        .collect();
    Ok(RolloutBatch { samples: samples? })
}

pub(super) fn run_ppo(
    settings: &TrainerSettings,
    origin: &ModelHandle,
    train_prompts: &[Prompt],
    val_prompts: &[Prompt],
    reward: &RewardSource<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = &settings.ppo;
    cfg.validate()?;
    let sched = &settings.schedule;

    let mut policy = origin.clone();
    policy.role = Role::Policy;
    let reference = origin.clone_frozen(Role::Reference);
    let mut critic = init_critic_from(&policy, child_seed(seed, "critic-init", 0))?;
    let mut adam_policy = Adam::new(AdamConfig::with_lr(cfg.lr), &policy.params);
    let mut adam_critic = Adam::new(AdamConfig::with_lr(cfg.critic_lr), &critic.params);
    let mut tracker = BestTracker::new(&policy.params);
    let mut log = Vec::new();

    let baseline = validate_policy(&policy, val_prompts, sched, seed)?;
    tracker.observe(0, baseline.mean_reward, &policy.params);
    let mut row = TrainLogRow::at(0, None);
    row.set_validation(&baseline);
    log.push(row);

    let mut aborted = None;
    let mut step = 0;
    let mut round = 0;
    'outer: while step < cfg.max_steps {
        let old = policy.clone_frozen(Role::OldPolicy);
        let batch = match collect_rollouts(
            &old,
            &reference,
            &critic,
            train_prompts,
            reward,
            cfg,
            sched,
            seed,
            round,
        ) {
            Ok(b) => b,
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break 'outer;
            }
            Err(e) => return Err(e),
        };
        round += 1;
        for _ in 0..cfg.epochs_per_batch {
            if step >= cfg.max_steps {
                break;
            }
            step += 1;
            let loss = match ppo_policy_step(&mut policy, &batch, cfg, &mut adam_policy)
                .and_then(|l| critic_step(&mut critic, &batch, &mut adam_critic).map(|_| l))
            {
                Ok(l) => l,
                Err(Error::Numerical(msg)) => {
                    aborted = Some(msg);
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let mut row = TrainLogRow::at(step, Some(loss));
            if step % sched.validate_every == 0 {
                let rep = validate_policy(&policy, val_prompts, sched, seed)?;
                tracker.observe(step, rep.mean_reward, &policy.params);
                row.set_validation(&rep);
                log.push(row);
                if tracker.exhausted(sched.patience) {
                    break 'outer;
                }
            } else {
                log.push(row);
            }
        }
    }
    Ok(tracker.into_outcome(&origin.config, log, step, aborted))
}
