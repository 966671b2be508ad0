//! Training procedures over the shared policy trunk.
//!
//! Five ways to move a pretrained policy: supervised steps on chosen
//! samples (`rs`), preference optimization against a frozen reference
//! (`dpo`), reward model regression (`rm`), and two on-policy methods
//! with clipped surrogates (`ppo`, `grpo`). All of them share the step
//! log shape, validation cadence, and best-checkpoint bookkeeping here.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, BucketReport, EvalConfig, Scorer};
use crate::model::{ModelHandle, Role};
use crate::numcore::ParamSet;
use crate::phoneme::HallucinationThresholds;
use crate::prefdata::{score_sample, GeneratedSample, PreferencePair};
use crate::seed::child_seed;
use crate::task::{Prompt, TokenSeq};

pub mod dpo;
pub mod grpo;
pub mod ppo;
pub mod rm;
pub mod rs;

pub use dpo::{dpo_loss, dpo_margin_probe, dpo_step, DpoConfig, PairExample};
pub use grpo::{
    grpo_advantages, grpo_loss, kl_k3, select_truncated, GroupBatch, GroupSample, GrpoConfig,
};
pub use ppo::{
    compute_advantages, critic_loss, init_critic_from, ppo_policy_loss, ppo_token_rewards,
    PpoConfig, RolloutBatch, RolloutSample,
};
pub use rm::{rm_batch_step, rm_step, rm_validation_l1, train_reward_model, RmConfig, RmExample, RmOutcome};
pub use rs::{pretrain, rs_step, PretrainConfig, RsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainerKind {
    #[serde(rename = "rs")]
    Rs,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "rs+dpo")]
    RsThenDpo,
    #[serde(rename = "ppo")]
    Ppo,
    #[serde(rename = "grpo")]
    Grpo,
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrainerKind::Rs => "rs",
            TrainerKind::Dpo => "dpo",
            TrainerKind::RsThenDpo => "rs+dpo",
            TrainerKind::Ppo => "ppo",
            TrainerKind::Grpo => "grpo",
        };
        f.write_str(s)
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rs" => Ok(TrainerKind::Rs),
            "dpo" => Ok(TrainerKind::Dpo),
            "rs+dpo" => Ok(TrainerKind::RsThenDpo),
            "ppo" => Ok(TrainerKind::Ppo),
            "grpo" => Ok(TrainerKind::Grpo),
            other => Err(Error::Config(format!(
                "unknown trainer kind {other:?}; expected rs|dpo|rs+dpo|ppo|grpo"
            ))),
        }
    }
}

/// Validation cadence and sampling setup shared by every trainer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub validate_every: usize,
    pub patience: usize,
    pub margin_probe_every: usize,
    pub eval: EvalConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            validate_every: 50,
            patience: 10,
            margin_probe_every: 10,
            eval: EvalConfig::default(),
        }
    }
}

/// One row of a trainer's step log. Optional fields are filled only on
/// validation or margin-probe steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub mean_validation_reward: Option<f64>,
    pub bucket_low: Option<f64>,
    pub bucket_mid: Option<f64>,
    pub bucket_high: Option<f64>,
    pub chosen_logprob_sum: Option<f64>,
    pub rejected_logprob_sum: Option<f64>,
}

impl TrainLogRow {
    pub fn at(step: usize, loss: Option<f64>) -> Self {
        TrainLogRow {
            step,
            loss,
            mean_validation_reward: None,
            bucket_low: None,
            bucket_mid: None,
            bucket_high: None,
            chosen_logprob_sum: None,
            rejected_logprob_sum: None,
        }
    }

    pub fn set_validation(&mut self, rep: &BucketReport) {
        self.mean_validation_reward = Some(rep.mean_reward);
        self.bucket_low = Some(rep.frac_low);
        self.bucket_mid = Some(rep.frac_mid);
        self.bucket_high = Some(rep.frac_high);
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    /// Checkpoint with the highest validation mean reward seen.
    pub best: ModelHandle,
    pub best_step: usize,
    pub best_val_reward: f64,
    pub final_step: usize,
    /// Set when training stopped on a numerical failure; `best` then holds
    /// the last good checkpoint.
    pub aborted: Option<String>,
}

/// A supervised example: condition on the prompt, predict the target.
#[derive(Debug, Clone)]
pub struct SeqExample {
    pub prompt: TokenSeq,
    pub target: TokenSeq,
}

/// Where on-policy trainers get their terminal reward.
pub enum RewardSource<'a> {
    GroundTruthPer { noise_rate: f64 },
    RewardModel(&'a ModelHandle),
}

impl RewardSource<'_> {
    pub fn terminal_reward(
        &self,
        prompt: &Prompt,
        tokens: &TokenSeq,
        th: &HallucinationThresholds,
        noise_seed: u64,
    ) -> Result<f64> {
        match self {
            RewardSource::GroundTruthPer { noise_rate } => {
                Ok(score_sample(prompt, 0, tokens.clone(), *noise_rate, noise_seed, th)?.reward)
            }
            RewardSource::RewardModel(rm) => rm.reward_score_predict(&prompt.tokens(), tokens),
        }
    }
}

/// All per-kind configurations in one serializable bundle.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub rs: RsConfig,
    pub dpo: DpoConfig,
    pub rm: RmConfig,
    pub ppo: PpoConfig,
    pub grpo: GrpoConfig,
}

/// Pre-generated samples and pairs for the off-policy trainers.
#[derive(Debug, Clone, Copy)]
pub struct OffPolicyData<'a> {
    pub samples: &'a [GeneratedSample],
    pub pairs: &'a [PreferencePair],
}

pub(crate) struct BestTracker {
    pub best_reward: f64,
    pub best_step: usize,
    pub best_params: ParamSet,
    stale: usize,
}

impl BestTracker {
    pub fn new(params: &ParamSet) -> Self {
        BestTracker {
            best_reward: f64::NEG_INFINITY,
            best_step: 0,
            best_params: params.clone(),
            stale: 0,
        }
    }

    pub fn observe(&mut self, step: usize, reward: f64, params: &ParamSet) {
        if reward > self.best_reward {
            self.best_reward = reward;
            self.best_step = step;
            self.best_params = params.clone();
            self.stale = 0;
        } else {
            self.stale += 1;
        }
    }

    pub fn exhausted(&self, patience: usize) -> bool {
        self.stale >= patience
    }

    pub fn into_outcome(
        self,
        config: &crate::model::ModelConfig,
        log: Vec<TrainLogRow>,
        final_step: usize,
        aborted: Option<String>,
    ) -> TrainOutcome {
        TrainOutcome {
            log,
            best: ModelHandle {
                config: config.clone(),
                params: self.best_params,
                role: Role::Policy,
            },
            best_step: self.best_step,
            best_val_reward: self.best_reward,
            final_step,
            aborted,
        }
    }
}

/// Validation report on a fixed seed so successive validations differ only
/// through the policy parameters.
pub(crate) fn validate_policy(
    policy: &ModelHandle,
    val_prompts: &[Prompt],
    sched: &ScheduleConfig,
    seed: u64,
) -> Result<BucketReport> {
    let out = evaluate_policy(
        policy,
        val_prompts,
        &sched.eval,
        &Scorer::GroundTruthPer,
        child_seed(seed, "validate", 0),
    )?;
    Ok(out.report)
}

pub(crate) fn index_samples(samples: &[GeneratedSample]) -> HashMap<&str, &GeneratedSample> {
    samples.iter().map(|s| (s.sample_id.as_str(), s)).collect()
}

pub(crate) fn index_prompts(prompts: &[Prompt]) -> HashMap<&str, &Prompt> {
    prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect()
}

/// The chosen sides of the pairs, deduplicated in first-appearance order.
pub fn chosen_examples(
    prompts: &[Prompt],
    samples: &[GeneratedSample],
    pairs: &[PreferencePair],
) -> Result<Vec<SeqExample>> {
    let by_prompt = index_prompts(prompts);
    let by_id = index_samples(samples);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for pair in pairs {
        if !seen.insert(pair.chosen_id.as_str()) {
            continue;
        }
        let s = by_id
            .get(pair.chosen_id.as_str())
            .ok_or_else(|| Error::Config(format!("pair references unknown sample {}", pair.chosen_id)))?;
        let p = by_prompt
            .get(s.prompt_id.as_str())
            .ok_or_else(|| Error::Config(format!("sample references unknown prompt {}", s.prompt_id)))?;
        out.push(SeqExample { prompt: p.tokens(), target: s.tokens.clone() });
    }
    if out.is_empty() {
        return Err(Error::Batch("no chosen samples in pair set".into()));
    }
    Ok(out)
}

/// Token-level view of the pairs for preference steps.
pub fn pair_examples(
    prompts: &[Prompt],
    samples: &[GeneratedSample],
    pairs: &[PreferencePair],
) -> Result<Vec<PairExample>> {
    let by_prompt = index_prompts(prompts);
    let by_id = index_samples(samples);
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let c = by_id
            .get(pair.chosen_id.as_str())
            .ok_or_else(|| Error::Config(format!("pair references unknown sample {}", pair.chosen_id)))?;
        let r = by_id
            .get(pair.rejected_id.as_str())
            .ok_or_else(|| Error::Config(format!("pair references unknown sample {}", pair.rejected_id)))?;
        let p = by_prompt
            .get(pair.prompt_id.as_str())
            .ok_or_else(|| Error::Config(format!("pair references unknown prompt {}", pair.prompt_id)))?;
        out.push(PairExample {
            prompt: p.tokens(),
            chosen: c.tokens.clone(),
            rejected: r.tokens.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Batch("empty pair set".into()));
    }
    Ok(out)
}

/// Runs one training procedure end to end and returns its log and best
/// checkpoint. Off-policy kinds need `data`; on-policy kinds need a reward
/// source. A numerical failure mid-run aborts cleanly: the outcome carries
/// the message and the last good checkpoint instead of an error.
pub fn run_trainer(
    kind: TrainerKind,
    settings: &TrainerSettings,
    origin: &ModelHandle,
    train_prompts: &[Prompt],
    val_prompts: &[Prompt],
    data: Option<&OffPolicyData<'_>>,
    reward: &RewardSource<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    let need_data = || {
        data.ok_or_else(|| {
            Error::Config(format!("trainer {kind} needs scored samples and pairs"))
        })
    };
    match kind {
        TrainerKind::Rs => {
            let d = need_data()?;
            rs::run_rs(settings, origin, train_prompts, val_prompts, d, seed, 0)
        }
        TrainerKind::Dpo => {
            let d = need_data()?;
            dpo::run_dpo(settings, origin, train_prompts, val_prompts, d, seed, 0)
        }
        TrainerKind::RsThenDpo => {
            let d = need_data()?;
            let rs_out = rs::run_rs(settings, origin, train_prompts, val_prompts, d, seed, 0)?;
            if rs_out.aborted.is_some() {
                return Ok(rs_out);
            }
            let dpo_out = dpo::run_dpo(
                settings,
                &rs_out.best,
                train_prompts,
                val_prompts,
                d,
                child_seed(seed, "dpo-phase", 0),
                rs_out.final_step,
            )?;
            let mut log = rs_out.log;
            log.extend(dpo_out.log);
            let (best, best_step, best_val) = if dpo_out.best_val_reward >= rs_out.best_val_reward
            {
                (dpo_out.best, dpo_out.best_step, dpo_out.best_val_reward)
            } else {
                (rs_out.best, rs_out.best_step, rs_out.best_val_reward)
            };
            Ok(TrainOutcome {
                log,
                best,
                best_step,
                best_val_reward: best_val,
                final_step: dpo_out.final_step,
                aborted: dpo_out.aborted,
            })
        }
        TrainerKind::Ppo => {
            ppo::run_ppo(settings, origin, train_prompts, val_prompts, reward, seed)
        }
        TrainerKind::Grpo => {
            grpo::run_grpo(settings, origin, train_prompts, val_prompts, reward, seed)
        }
    }
}
