//! Preference pair construction.
//!
//! Generated samples are scored against their prompt's lyric, then turned
//! into chosen-rejected pairs by three rules: a large error-count gap, a
//! min/max-PER fallback, and clean-versus-hallucinated cross pairs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phoneme::{
    align, classify_hallucinated, error_segments, reward_from_per, simulate_asr_noise,
    HallucinationThresholds, PhonemeSeq,
};
use crate::task::{decode_tokens, Prompt, TokenSeq, Vocabulary};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub sample_id: String,
    pub prompt_id: String,
    pub tokens: TokenSeq,
    pub hyp_phonemes: PhonemeSeq,
    /// Unclamped PER; may exceed 1 for badly inflated generations.
    pub per_raw: f64,
    pub n_errors: usize,
    /// 1 - min(per_raw, 1), in [0, 1].
    pub reward: f64,
    pub hallucinated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub err_diff_threshold: usize,
    pub ins_run: usize,
    pub omit: usize,
    pub window: usize,
    pub group_size: usize,
}

impl Default for PairingConfig {
    /// Defaults scaled to the short toy lyrics.
    fn default() -> Self {
        PairingConfig { err_diff_threshold: 8, ins_run: 3, omit: 6, window: 10, group_size: 4 }
    }
}

impl PairingConfig {
    /// Threshold profile for full-length (hundreds of phonemes) songs.
    pub fn full_scale() -> Self {
        PairingConfig { err_diff_threshold: 40, ins_run: 5, omit: 10, window: 15, group_size: 4 }
    }

    pub fn thresholds(&self) -> HallucinationThresholds {
        HallucinationThresholds { ins_run: self.ins_run, omit: self.omit, window: self.window }
    }

    pub fn validate(&self) -> Result<()> {
        if self.err_diff_threshold == 0
            || self.ins_run == 0
            || self.omit == 0
            || self.window == 0
            || self.group_size < 2
        {
            return Err(Error::Config("pairing config fields must be positive".into()));
        }
        Ok(())
    }
}

/// Decode, push through the noise channel, align, and judge one generation.
pub fn score_sample(
    prompt: &Prompt,
    sample_index: usize,
    tokens: TokenSeq,
    noise_rate: f64,
    seed: u64,
    th: &HallucinationThresholds,
) -> Result<GeneratedSample> {
    let vocab = Vocabulary::default();
    let decoded = decode_tokens(&tokens, &vocab)?;
    let hyp = simulate_asr_noise(&decoded, Vocabulary::PHONEME_COUNT, noise_rate, seed)?;
    let a = align(&prompt.lyric, &hyp);
    let per_raw = a.distance as f64 / prompt.lyric.len() as f64;
    let reward = reward_from_per(per_raw)?;
    let segs = error_segments(&a, prompt.lyric.len(), th.window);
    let hallucinated = classify_hallucinated(&segs, th);
    Ok(GeneratedSample {
        sample_id: format!("{}-{}", prompt.prompt_id, sample_index),
        prompt_id: prompt.prompt_id.clone(),
        tokens,
        hyp_phonemes: hyp,
        per_raw,
        n_errors: a.distance,
        reward,
        hallucinated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairRule {
    ErrDiff,
    MinmaxFallback,
    HallucCross,
}

impl PairRule {
    fn strength(self) -> u8 {
        match self {
            PairRule::HallucCross => 2,
            PairRule::ErrDiff => 1,
            PairRule::MinmaxFallback => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    #[serde(rename = "chosen")]
    pub chosen_id: String,
    #[serde(rename = "rejected")]
    pub rejected_id: String,
    pub rule: PairRule,
}

/// Pairs one prompt's sample group.
///
/// Rule 1 pairs every two samples whose error counts differ by more than the
/// threshold. Rule 3 pairs every clean sample with every hallucinated one
/// (skipping combinations where the clean side actually has more errors).
/// Rule 2 fires only when the other rules produced nothing: the minimum-PER
/// sample is preferred over the maximum-PER one, ties broken by sample id.
pub fn build_pairs(group: &[GeneratedSample], cfg: &PairingConfig) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    if group.len() != cfg.group_size {
        return Err(Error::Grouping(format!(
            "group has {} samples, config expects {}",
            group.len(),
            cfg.group_size
        )));
    }
    let prompt_id = &group[0].prompt_id;
    if group.iter().any(|s| &s.prompt_id != prompt_id) {
        return Err(Error::Grouping(format!(
            "mixed prompt ids in group for {prompt_id}"
        )));
    }

    let mut pairs: Vec<PreferencePair> = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let push = |pairs: &mut Vec<PreferencePair>,
                    seen: &mut HashMap<(String, String), usize>,
                    chosen: &GeneratedSample,
                    rejected: &GeneratedSample,
                    rule: PairRule| {
        debug_assert!(chosen.n_errors <= rejected.n_errors);
        let key = (chosen.sample_id.clone(), rejected.sample_id.clone());
        match seen.get(&key) {
            Some(&at) => {
                if rule.strength() > pairs[at].rule.strength() {
                    pairs[at].rule = rule;
                }
            }
            None => {
                seen.insert(key, pairs.len());
                pairs.push(PreferencePair {
                    prompt_id: chosen.prompt_id.clone(),
                    chosen_id: chosen.sample_id.clone(),
                    rejected_id: rejected.sample_id.clone(),
                    rule,
                });
            }
        }
    };

    // Rule 1: large error-count difference.
    for i in 0..group.len() {
        for j in i + 1..group.len() {
            let (a, b) = (&group[i], &group[j]);
            let diff = a.n_errors.abs_diff(b.n_errors);
            if diff > cfg.err_diff_threshold {
                let (chosen, rejected) = if a.n_errors < b.n_errors { (a, b) } else { (b, a) };
                push(&mut pairs, &mut seen, chosen, rejected, PairRule::ErrDiff);
            }
        }
    }

    // Rule 3: clean vs hallucinated cross product.
    for clean in group.iter().filter(|s| !s.hallucinated) {
        for halluc in group.iter().filter(|s| s.hallucinated) {
            if clean.n_errors > halluc.n_errors {
                continue;
            }
            push(&mut pairs, &mut seen, clean, halluc, PairRule::HallucCross);
        }
    }

    // Rule 2: fallback single pair when nothing else fired.
    if pairs.is_empty() {
        let min = group
            .iter()
            .min_by(|a, b| {
                a.per_raw
                    .partial_cmp(&b.per_raw)
                    .unwrap()
                    .then_with(|| a.sample_id.cmp(&b.sample_id))
            })
            .unwrap();
        let max = group
            .iter()
            .max_by(|a, b| {
                a.per_raw
                    .partial_cmp(&b.per_raw)
                    .unwrap()
                    .then_with(|| a.sample_id.cmp(&b.sample_id))
            })
            .unwrap();
        if min.sample_id != max.sample_id {
            push(&mut pairs, &mut seen, min, max, PairRule::MinmaxFallback);
        }
    }

    Ok(pairs)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PairingStats {
    pub n_samples: usize,
    pub n_groups: usize,
    pub n_pairs: usize,
    pub pairs_err_diff: usize,
    pub pairs_minmax_fallback: usize,
    pub pairs_halluc_cross: usize,
    /// PER histogram over samples: ten 0.1-wide bins plus an overflow bin
    /// for per >= 1.
    pub per_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub stats: PairingStats,
}

/// Groups samples by prompt (in first-appearance order) and pairs each
/// complete group. Incomplete groups abort the build.
pub fn build_dataset(samples: &[GeneratedSample], cfg: &PairingConfig) -> Result<PreferenceDataset> {
    cfg.validate()?;
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&GeneratedSample>> = HashMap::new();
    for s in samples {
        let slot = groups.entry(&s.prompt_id).or_default();
        if slot.is_empty() {
            order.push(&s.prompt_id);
        }
        slot.push(s);
    }
    let bad: Vec<&str> = order
        .iter()
        .copied()
        .filter(|pid| groups[pid].len() != cfg.group_size)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Grouping(format!(
            "incomplete groups (expected {} samples each): {}",
            cfg.group_size,
            bad.join(", ")
        )));
    }

    let mut stats = PairingStats {
        n_samples: samples.len(),
        n_groups: order.len(),
        per_histogram: vec![0; 11],
        ..PairingStats::default()
    };
    for s in samples {
        let bin = ((s.per_raw * 10.0).floor() as usize).min(10);
        stats.per_histogram[bin] += 1;
    }

    let mut pairs = Vec::new();
    for pid in order {
        let group: Vec<GeneratedSample> = groups[pid].iter().map(|s| (*s).clone()).collect();
        let mut p = build_pairs(&group, cfg)?;
        for pair in &p {
            match pair.rule {
                PairRule::ErrDiff => stats.pairs_err_diff += 1,
                PairRule::MinmaxFallback => stats.pairs_minmax_fallback += 1,
                PairRule::HallucCross => stats.pairs_halluc_cross += 1,
            }
        }
        pairs.append(&mut p);
    }
    stats.n_pairs = pairs.len();
    Ok(PreferenceDataset { pairs, stats })
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let r = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line)?);
    }
    Ok(pairs)
}

pub fn save_stats(path: &Path, stats: &PairingStats) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(stats)?)?;
    Ok(())
}

pub fn save_samples(path: &Path, samples: &[GeneratedSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<GeneratedSample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
