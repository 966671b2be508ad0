//! Phoneme-level alignment metrics.
//!
//! Levenshtein alignment with a full edit trace, phoneme error rate, the
//! PER-to-reward mapping, and the segment analyses (insertion runs, windowed
//! omission counts) used to flag hallucinated generations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

pub type PhonemeSeq = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

/// One step of the alignment. For `Match`/`Sub` both positions are the
/// consumed indices. A `Del` consumes `ref_pos` while the hypothesis cursor
/// rests at `hyp_pos`; an `Ins` consumes `hyp_pos` while the reference
/// cursor rests at `ref_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignStep {
    pub op: EditOp,
    pub ref_pos: usize,
    pub hyp_pos: usize,
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub ops: Vec<AlignStep>,
    pub n_sub: usize,
    pub n_ins: usize,
    pub n_del: usize,
    pub distance: usize,
}

/// Minimal unit-cost edit alignment of `hyp` against `reference`.
///
/// The backtrace is canonical: on cost ties it prefers Match/Sub, then Del,
/// then Ins, so the op trace (and everything derived from it) is identical
/// across platforms.
pub fn align(reference: &[u32], hyp: &[u32]) -> AlignmentResult {
    let m = reference.len();
    let n = hyp.len();
    let w = n + 1;
    let mut d = vec![0u32; (m + 1) * w];
    for j in 0..=n {
        d[j] = j as u32;
    }
    for i in 1..=m {
        d[i * w] = i as u32;
        for j in 1..=n {
            let sub_cost = if reference[i - 1] == hyp[j - 1] { 0 } else { 1 };
            let diag = d[(i - 1) * w + j - 1] + sub_cost;
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let sub_cost = if reference[i - 1] == hyp[j - 1] { 0 } else { 1 };
            if d[(i - 1) * w + j - 1] + sub_cost == here {
                let op = if sub_cost == 0 { EditOp::Match } else { EditOp::Sub };
                ops.push(AlignStep { op, ref_pos: i - 1, hyp_pos: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(AlignStep { op: EditOp::Del, ref_pos: i - 1, hyp_pos: j });
            i -= 1;
            continue;
        }
        ops.push(AlignStep { op: EditOp::Ins, ref_pos: i, hyp_pos: j - 1 });
        j -= 1;
    }
    ops.reverse();

    let mut n_sub = 0;
    let mut n_ins = 0;
    let mut n_del = 0;
    for s in &ops {
        match s.op {
            EditOp::Sub => n_sub += 1,
            EditOp::Ins => n_ins += 1,
            EditOp::Del => n_del += 1,
            EditOp::Match => {}
        }
    }
    let distance = d[m * w + n] as usize;
    debug_assert_eq!(distance, n_sub + n_ins + n_del);
    AlignmentResult { ops, n_sub, n_ins, n_del, distance }
}

/// Applies an alignment's ops to the reference, reproducing the hypothesis.
pub fn replay_alignment(reference: &[u32], hyp: &[u32], a: &AlignmentResult) -> Vec<u32> {
    let mut out = Vec::with_capacity(hyp.len());
    for s in &a.ops {
        match s.op {
            EditOp::Match => out.push(reference[s.ref_pos]),
            EditOp::Sub | EditOp::Ins => out.push(hyp[s.hyp_pos]),
            EditOp::Del => {}
        }
    }
    out
}

/// Phoneme error rate: edit distance over reference length. May exceed 1.
pub fn per(reference: &[u32], hyp: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(align(reference, hyp).distance as f64 / reference.len() as f64)
}

/// Maps PER to a reward in [0, 1]: 1 - min(per, 1).
pub fn reward_from_per(per: f64) -> Result<f64> {
    if per < 0.0 {
        return Err(Error::Domain(format!("negative per {per}")));
    }
    Ok(1.0 - per.min(1.0))
}

/// Structural error summary of one alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorSegments {
    /// Maximal runs of consecutive insertions anchored at one reference
    /// position, as (ref_pos, run_length).
    pub insertion_runs: Vec<(usize, usize)>,
    /// Maximum number of deletions inside any window of `window` consecutive
    /// reference positions.
    pub window_omissions: usize,
    /// Window size the omission count was computed with.
    pub window: usize,
}

pub fn error_segments(a: &AlignmentResult, ref_len: usize, window: usize) -> ErrorSegments {
    assert!(window > 0, "window must be positive");

    let mut insertion_runs = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for s in &a.ops {
        match s.op {
            EditOp::Ins => match &mut run {
                Some((pos, len)) if *pos == s.ref_pos => *len += 1,
                _ => {
                    if let Some(r) = run.take() {
                        insertion_runs.push(r);
                    }
                    run = Some((s.ref_pos, 1));
                }
            },
            _ => {
                if let Some(r) = run.take() {
                    insertion_runs.push(r);
                }
            }
        }
    }
    if let Some(r) = run {
        insertion_runs.push(r);
    }

    let mut del_at = vec![0usize; ref_len];
    for s in &a.ops {
        if s.op == EditOp::Del {
            del_at[s.ref_pos] += 1;
        }
    }
    let mut window_omissions = 0;
    if ref_len > 0 {
        let mut sum: usize = del_at.iter().take(window.min(ref_len)).sum();
        window_omissions = sum;
        for s in window..ref_len {
            sum += del_at[s];
            sum -= del_at[s - window];
            window_omissions = window_omissions.max(sum);
        }
    }

    ErrorSegments { insertion_runs, window_omissions, window }
}

/// Hallucination rule thresholds; comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HallucinationThresholds {
    pub ins_run: usize,
    pub omit: usize,
    pub window: usize,
}

impl Default for HallucinationThresholds {
    fn default() -> Self {
        HallucinationThresholds { ins_run: 5, omit: 10, window: 15 }
    }
}

impl HallucinationThresholds {
    /// Scaled-down thresholds matched to the short toy sequences.
    pub fn toy() -> Self {
        HallucinationThresholds { ins_run: 3, omit: 6, window: 10 }
    }
}

/// True iff any insertion run exceeds `ins_run` or the windowed omission
/// count exceeds `omit` (both strictly).
pub fn classify_hallucinated(segs: &ErrorSegments, th: &HallucinationThresholds) -> bool {
    assert_eq!(
        segs.window, th.window,
        "segments were computed with window {} but thresholds use {}",
        segs.window, th.window
    );
    segs.insertion_runs.iter().any(|&(_, len)| len > th.ins_run)
        || segs.window_omissions > th.omit
}

/// Substitution-only noise channel: each phoneme is independently replaced
/// by a uniformly random different id from `[0, vocab)` with probability
/// `rate`. Length-preserving.
pub fn simulate_asr_noise(hyp: &[u32], vocab: u32, rate: f64, seed: u64) -> Result<Vec<u32>> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(Error::Domain(format!("noise rate {rate} outside [0, 0.5]")));
    }
    if vocab < 2 {
        return Err(Error::Domain("noise channel needs vocab >= 2".into()));
    }
    use rand::Rng;
    let mut rng = stream_rng(seed, "asr-noise", 0);
    let mut out = Vec::with_capacity(hyp.len());
    for &p in hyp {
        if rng.gen::<f64>() < rate {
            let mut q = rng.gen_range(0..vocab - 1);
            if q >= p {
                q += 1;
            }
            out.push(q);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}
