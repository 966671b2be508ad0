//! Critic-free group-relative optimization: within-group reward centering,
//! truncated top/bottom sample selection, and a K3 divergence penalty.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{token_logprobs_tape, ModelConfig, ModelHandle, Role};
use crate::numcore::{Adam, AdamConfig, Bound, Tape, Tensor, VarId};
use crate::phoneme::HallucinationThresholds;
use crate::seed::{child_seed, stream_rng};
use crate::task::{Prompt, TokenSeq};

use super::{
    validate_policy, BestTracker, RewardSource, ScheduleConfig, TrainLogRow, TrainOutcome,
    TrainerSettings,
};

/// How many samples of each group survive truncated selection.
pub const KEEP: usize = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub kl_beta: f64,
    pub epsilon: f64,
    pub group_size: usize,
    /// Average the surrogate over all selected tokens jointly instead of
    /// per sequence first.
    pub token_level_loss: bool,
    /// Reproduce the printed K3 form with +1 instead of -1.
    pub kl_literal_plus_one: bool,
    /// Scaled x100 from the full-scale 5e-7 to fit the desk model.
    pub lr: f64,
    pub prompts_per_batch: usize,
    pub max_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            kl_beta: 0.0,
            epsilon: 0.2,
            group_size: 8,
            token_level_loss: false,
            kl_literal_plus_one: false,
            lr: 5e-5,
            prompts_per_batch: 2,
            max_steps: 200,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < KEEP {
            return Err(Error::Config(format!(
                "group_size {} below the {KEEP} kept samples",
                self.group_size
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0,1)", self.epsilon)));
        }
        if self.prompts_per_batch == 0 {
            return Err(Error::Config("prompts_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Mean-centered group advantages; optionally scaled by the group standard
/// deviation (guarded away from zero).
pub fn grpo_advantages(rewards: &[f64], use_std: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Group(format!("group of {} is too small", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if use_std {
        let var = adv.iter().map(|a| a * a).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for a in adv.iter_mut() {
            *a /= std;
        }
    }
    Ok(adv)
}

/// Indices of the two highest and two lowest rewards, ties broken by
/// sample id. Returned sorted ascending.
pub fn select_truncated(rewards: &[f64], sample_ids: &[String]) -> Result<Vec<usize>> {
    if rewards.len() < KEEP {
        return Err(Error::Group(format!(
            "group of {} cannot keep {KEEP} samples",
            rewards.len()
        )));
    }
    if rewards.len() != sample_ids.len() {
        return Err(Error::Group(format!(
            "{} rewards for {} sample ids",
            rewards.len(),
            sample_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| {
        rewards[a]
            .partial_cmp(&rewards[b])
            .unwrap()
            .then_with(|| sample_ids[a].cmp(&sample_ids[b]))
    });
    let mut keep = vec![order[0], order[1], order[order.len() - 2], order[order.len() - 1]];
    keep.sort_unstable();
    Ok(keep)
}

/// Per-token K3 divergence estimate from the two log-probabilities of the
/// sampled token. Default form rho - log rho - 1; the literal form flips
/// the constant to +1.
pub fn kl_k3(policy_logprob: f64, ref_logprob: f64, literal_plus_one: bool) -> f64 {
    let d = ref_logprob - policy_logprob;
    let c = if literal_plus_one { 1.0 } else { -1.0 };
    d.exp() - d + c
}

#[derive(Debug, Clone)]
pub struct GroupSample {
    pub sample_id: String,
    pub prompt: TokenSeq,
    pub tokens: TokenSeq,
    pub reward: f64,
}

/// One prompt's sample group with its centered advantages and the
/// truncated selection.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub samples: Vec<GroupSample>,
    pub advantages: Vec<f64>,
    pub selected: Vec<usize>,
}

impl GroupBatch {
    pub fn build(samples: Vec<GroupSample>) -> Result<GroupBatch> {
        let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
        let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
        let advantages = grpo_advantages(&rewards, false)?;
        let selected = select_truncated(&rewards, &ids)?;
        let g = GroupBatch { samples, advantages, selected };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.advantages.len() != self.samples.len() {
            return Err(Error::Group("advantage count mismatch".into()));
        }
        let sum: f64 = self.advantages.iter().sum();
        if sum.abs() > 1e-9 {
            return Err(Error::Group(format!("advantages sum to {sum}, not zero")));
        }
        if self.selected.len() != KEEP {
            return Err(Error::Group(format!("{} selected, expected {KEEP}", self.selected.len())));
        }
        if self.selected.iter().any(|&i| i >= self.samples.len()) {
            return Err(Error::Group("selected index out of range".into()));
        }
        Ok(())
    }

    fn selected_tokens(&self) -> usize {
        self.selected.iter().map(|&i| self.samples[i].tokens.len()).sum()
    }
}

struct Weights {
    surrogate: f64,
    kl: f64,
}

fn weights(cfg: &GrpoConfig, groups: &[GroupBatch]) -> Weights {
    let total_tokens: usize = groups.iter().map(GroupBatch::selected_tokens).sum();
    let surrogate = if cfg.token_level_loss {
        1.0 / total_tokens as f64
    } else {
        1.0 / (KEEP * groups.len()) as f64
    };
    Weights { surrogate, kl: 1.0 / total_tokens as f64 }
}

/// Builds one selected sample's loss contribution on the tape.
#[allow(clippy::too_many_arguments)]
fn sample_contribution_tape(
    t: &mut Tape,
    b: &Bound,
    mcfg: &ModelConfig,
    cfg: &GrpoConfig,
    s: &GroupSample,
    old_lp: &[f64],
    ref_lp: &[f64],
    advantage: f64,
    w: &Weights,
) -> Result<VarId> {
    let n = s.tokens.len();
    let new_lps = token_logprobs_tape(t, b, mcfg, &s.prompt, &s.tokens)?;
    let old = t.constant(Tensor::from_vec(n, 1, old_lp.to_vec()));
    let diff = t.sub(new_lps, old);
    let ratio = t.exp(diff);
    let unclipped = t.scale(ratio, advantage);
    let clipped_ratio = t.clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let clipped = t.scale(clipped_ratio, advantage);
    let objective = t.min_elem(unclipped, clipped);
    let mut contrib = if cfg.token_level_loss {
        let total = t.sum_all(objective);
        t.scale(total, -w.surrogate)
    } else {
        let per_seq = t.mean_all(objective);
        t.scale(per_seq, -w.surrogate)
    };
    if cfg.kl_beta != 0.0 {
        let refc = t.constant(Tensor::from_vec(n, 1, ref_lp.to_vec()));
        let d = t.sub(refc, new_lps);
        let e = t.exp(d);
        let body = t.sub(e, d);
        let k3 = t.add_const(body, if cfg.kl_literal_plus_one { 1.0 } else { -1.0 });
        let k3_total = t.sum_all(k3);
        let penalty = t.scale(k3_total, cfg.kl_beta * w.kl);
        contrib = t.add(contrib, penalty);
    }
    Ok(contrib)
}

fn selected_logprobs(
    old: &ModelHandle,
    reference: &ModelHandle,
    group: &GroupBatch,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    group
        .selected
        .iter()
        .map(|&i| {
            let s = &group.samples[i];
            let o = old.sequence_logprobs(&s.prompt, &s.tokens)?;
            let r = reference.sequence_logprobs(&s.prompt, &s.tokens)?;
            Ok((o, r))
        })
        .collect()
}

/// Loss over one group, without gradients. Sequence mode averages each
/// selected sample over its tokens and then over the four kept samples;
/// token mode averages over all kept tokens jointly.
pub fn grpo_loss(
    policy: &ModelHandle,
    old: &ModelHandle,
    reference: &ModelHandle,
    group: &GroupBatch,
    cfg: &GrpoConfig,
) -> Result<f64> {
    cfg.validate()?;
    group.validate()?;
    let groups = std::slice::from_ref(group);
    let w = weights(cfg, groups);
    let lps = selected_logprobs(old, reference, group)?;
    let mcfg = policy.config.clone();
    let mut loss = 0.0;
    for (k, &i) in group.selected.iter().enumerate() {
        let s = &group.samples[i];
        let (old_lp, ref_lp) = &lps[k];
        loss += policy.params.eval_value(|t, b| {
            sample_contribution_tape(t, b, &mcfg, cfg, s, old_lp, ref_lp, group.advantages[i], &w)
        })?;
    }
    Ok(loss)
}

/// One optimizer step over a batch of groups.
pub fn grpo_step(
    policy: &mut ModelHandle,
    old: &ModelHandle,
    reference: &ModelHandle,
    groups: &[GroupBatch],
    cfg: &GrpoConfig,
    adam: &mut Adam,
) -> Result<f64> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Batch("no groups in batch".into()));
    }
    groups.iter().try_for_each(GroupBatch::validate)?;
    let w = weights(cfg, groups);
    let mcfg = policy.config.clone();
    policy.params.zero_grad();
    let mut loss = 0.0;
    for group in groups {
        let lps = selected_logprobs(old, reference, group)?;
        for (k, &i) in group.selected.iter().enumerate() {
            let s = &group.samples[i];
            let (old_lp, ref_lp) = &lps[k];
            loss += policy.params.eval_with_gradients(|t, b| {
                sample_contribution_tape(
                    t,
                    b,
                    &mcfg,
                    cfg,
                    s,
                    old_lp,
                    ref_lp,
                    group.advantages[i],
                    &w,
                )
            })?;
        }
    }
    adam.step(&mut policy.params);
    Ok(loss)
}

/// Samples and scores one batch of groups against a frozen snapshot.
pub fn collect_groups(
    old: &ModelHandle,
    prompts: &[Prompt],
    reward: &RewardSource<'_>,
    cfg: &GrpoConfig,
    sched: &ScheduleConfig,
    seed: u64,
    round: usize,
) -> Result<Vec<GroupBatch>> {
    if prompts.is_empty() {
        return Err(Error::Batch("no training prompts".into()));
    }
    let mut rng = stream_rng(child_seed(seed, "grpo-prompts", round as u64), "grpo", 0);
    let picks: Vec<usize> =
        (0..cfg.prompts_per_batch).map(|_| rng.gen_range(0..prompts.len())).collect();
    let th = HallucinationThresholds::toy();
    picks
        .iter()
        .enumerate()
        .map(|(gi, &pi)| {
            let p = &prompts[pi];
            let base = ((round * cfg.prompts_per_batch + gi) * cfg.group_size) as u64;
            let samples: Result<Vec<GroupSample>> = (0..cfg.group_size)
                .into_par_iter()
                .map(|j| {
                    let k = base + j as u64;
                    let tokens = old.sample_sequence(
                        &p.tokens(),
                        sched.eval.max_gen_len,
                        sched.eval.temperature,
                        child_seed(seed, "grpo-rollout", k),
                    )?;
                    let r = reward.terminal_reward(
                        p,
                        &tokens,
                        &th,
                        child_seed(seed, "grpo-noise", k),
                    )?;
                    Ok(GroupSample {
                        sample_id: format!("{}-{}", p.prompt_id, j),
                        prompt: p.tokens(),
                        tokens,
                        reward: r,
                    })
                })
                .collect();
            GroupBatch::build(samples?)
        })
        .collect()
}

pub(super) fn run_grpo(
    settings: &TrainerSettings,
    origin: &ModelHandle,
    train_prompts: &[Prompt],
    val_prompts: &[Prompt],
    reward: &RewardSource<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = &settings.grpo;
    cfg.validate()?;
    let sched = &settings.schedule;

    let mut policy = origin.clone();
    policy.role = Role::Policy;
    let reference = origin.clone_frozen(Role::Reference);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &policy.params);
    let mut tracker = BestTracker::new(&policy.params);
    let mut log = Vec::new();

    let baseline = validate_policy(&policy, val_prompts, sched, seed)?;
    tracker.observe(0, baseline.mean_reward, &policy.params);
    let mut row = TrainLogRow::at(0, None);
    row.set_validation(&baseline);
    log.push(row);

    let mut aborted = None;
    let mut step = 0;
    while step < cfg.max_steps {
        let old = policy.clone_frozen(Role::OldPolicy);
        let groups =
            match collect_groups(&old, train_prompts, reward, cfg, sched, seed, step) {
                Ok(g) => g,
                Err(Error::Numerical(msg)) => {
                    aborted = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            };
        step += 1;
        let loss = match grpo_step(&mut policy, &old, &reference, &groups, cfg, &mut adam) {
            Ok(l) => l,
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break;
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
                break;
            }
        } else {
            log.push(row);
        }
    }
    Ok(tracker.into_outcome(&origin.config, log, step, aborted))
}
