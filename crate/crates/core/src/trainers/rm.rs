//! Reward model regression: L1 loss against the alignment-derived reward.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reward_predict_tape, ModelHandle};
use crate::numcore::{Adam, AdamConfig, ParamSet};
use crate::prefdata::GeneratedSample;
use crate::seed::{child_seed, stream_rng};
use crate::task::{Prompt, TokenSeq};

use super::index_prompts;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub patience: usize,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig { lr: 1e-3, batch: 16, max_steps: 1500, validate_every: 50, patience: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct RmExample {
    pub prompt: TokenSeq,
    pub tokens: TokenSeq,
    pub target: f64,
}

/// Joins scored samples with their prompts into regression examples.
pub fn rm_examples(prompts: &[Prompt], samples: &[GeneratedSample]) -> Result<Vec<RmExample>> {
    let by_prompt = index_prompts(prompts);
    samples
        .iter()
        .map(|s| {
            let p = by_prompt.get(s.prompt_id.as_str()).ok_or_else(|| {
                Error::Config(format!("sample references unknown prompt {}", s.prompt_id))
            })?;
            Ok(RmExample { prompt: p.tokens(), tokens: s.tokens.clone(), target: s.reward })
        })
        .collect()
}

/// One optimizer step on a batch; loss is the mean absolute error.
pub fn rm_batch_step(rm: &mut ModelHandle, batch: &[RmExample], adam: &mut Adam) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Batch("empty reward batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let cfg = rm.config.clone();
    rm.params.zero_grad();
    let mut loss = 0.0;
    for ex in batch {
        loss += rm.params.eval_with_gradients(|t, b| {
            let pred = reward_predict_tape(t, b, &cfg, &ex.prompt, &ex.tokens)?;
            let diff = t.add_const(pred, -ex.target);
            let l1 = t.abs(diff);
            Ok(t.scale(l1, w))
        })?;
    }
    adam.step(&mut rm.params);
    Ok(loss)
}

/// Single-example step: |prediction - target|, one update.
pub fn rm_step(rm: &mut ModelHandle, ex: &RmExample, adam: &mut Adam) -> Result<f64> {
    rm_batch_step(rm, std::slice::from_ref(ex), adam)
}

/// Mean absolute error on held-out examples, no gradients involved.
pub fn rm_validation_l1(rm: &ModelHandle, val: &[RmExample]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Batch("empty validation set".into()));
    }
    let mut total = 0.0;
    for ex in val {
        let pred = rm.reward_score_predict(&ex.prompt, &ex.tokens)?;
        total += (pred - ex.target).abs();
    }
    Ok(total / val.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RmLogRow {
    pub step: usize,
    pub loss: f64,
    pub val_l1: Option<f64>,
}

#[derive(Debug)]
pub struct RmOutcome {
    pub best: ModelHandle,
    pub best_step: usize,
    pub best_val_l1: f64,
    pub log: Vec<RmLogRow>,
    pub aborted: Option<String>,
}

/// Trains a reward model from `init`, keeping the checkpoint with the
/// lowest held-out L1.
pub fn train_reward_model(
    init: &ModelHandle,
    train: &[RmExample],
    val: &[RmExample],
    cfg: &RmConfig,
    seed: u64,
) -> Result<RmOutcome> {
    if train.is_empty() {
        return Err(Error::Batch("empty reward training set".into()));
    }
    let mut rm = init.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &rm.params);
    let mut best_l1 = rm_validation_l1(&rm, val)?;
    let mut best_params: ParamSet = rm.params.clone();
    let mut best_step = 0;
    let mut stale = 0;
    let mut log = vec![RmLogRow { step: 0, loss: f64::NAN, val_l1: Some(best_l1) }];

    let mut rng = stream_rng(child_seed(seed, "rm-shuffle", 0), "rm", 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut aborted = None;
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let loss = match rm_batch_step(&mut rm, &batch, &mut adam) {
            Ok(l) => l,
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut row = RmLogRow { step, loss, val_l1: None };
        if step % cfg.validate_every == 0 {
            let l1 = rm_validation_l1(&rm, val)?;
            row.val_l1 = Some(l1);
            if l1 < best_l1 {
                best_l1 = l1;
                best_params = rm.params.clone();
                best_step = step;
                stale = 0;
            } else {
                stale += 1;
            }
            log.push(row);
            if stale >= cfg.patience {
                break;
            }
        } else {
            log.push(row);
        }
    }
    Ok(RmOutcome {
        best: ModelHandle { config: init.config.clone(), params: best_params, role: init.role },
        best_step,
        best_val_l1: best_l1,
        log,
        aborted,
    })
}
