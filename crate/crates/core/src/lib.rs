//! Synthetic lyric-to-song laboratory.
//!
//! A tiny autoregressive token model is pretrained to echo phoneme prompts
//! as song-token trajectories, then improved with preference-based RL
//! (rejection sampling, DPO, PPO, GRPO) against a phoneme-error-rate reward.
//! Everything runs on CPU in f64 and is bit-deterministic given a seed.

pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod phoneme;
pub mod prefdata;
pub mod seed;
pub mod task;
pub mod trainers;

pub use error::{Error, Result};
