//! Synthetic lyric-to-song environment.
//!
//! Prompts are short phoneme "lyrics" plus a style token. A ground-truth
//! trajectory sings the lyric back with occasional rests; a corruption
//! generator injects the hallucination modes the trainers are meant to fix
//! (runaway repetition, omitted spans, abrupt endings, style-motif echo).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phoneme::PhonemeSeq;
use crate::seed::{child_seed, fnv1a_hash, stream_rng};

pub type TokenSeq = Vec<u32>;

/// Token layout: phonemes 0..24, then BOS, EOS, REST, then 8 style tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    motifs: [[u32; 3]; 8],
}

impl Vocabulary {
    pub const PHONEME_COUNT: u32 = 24;
    pub const BOS: u32 = 24;
    pub const EOS: u32 = 25;
    pub const REST: u32 = 26;
    pub const STYLE_BASE: u32 = 27;
    pub const STYLE_COUNT: u32 = 8;
    pub const SIZE: u32 = Self::STYLE_BASE + Self::STYLE_COUNT;

    pub fn is_phoneme(id: u32) -> bool {
        id < Self::PHONEME_COUNT
    }

    pub fn is_style(id: u32) -> bool {
        (Self::STYLE_BASE..Self::SIZE).contains(&id)
    }

    pub fn style_token(style_index: u32) -> u32 {
        assert!(style_index < Self::STYLE_COUNT);
        Self::STYLE_BASE + style_index
    }

    /// The fixed 3-phoneme motif a style token decodes to.
    pub fn motif(&self, style_token: u32) -> Result<&[u32; 3]> {
        if !Self::is_style(style_token) {
            return Err(Error::Vocab(style_token));
        }
        Ok(&self.motifs[(style_token - Self::STYLE_BASE) as usize])
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            motifs: [
                [2, 11, 2],
                [17, 3, 8],
                [4, 4, 9],
                [21, 0, 13],
                [6, 19, 6],
                [10, 23, 1],
                [15, 7, 20],
                [12, 5, 18],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub lyric: PhonemeSeq,
    /// Style token id (not the style index).
    pub style: u32,
}

impl Prompt {
    /// Conditioning tokens fed to the model: style token then the lyric.
    pub fn tokens(&self) -> TokenSeq {
        let mut t = Vec::with_capacity(self.lyric.len() + 1);
        t.push(self.style);
        t.extend_from_slice(&self.lyric);
        t
    }
}

pub const LYRIC_LEN_RANGE: (usize, usize) = (10, 20);
pub const REST_RATE: f64 = 0.10;

/// Deterministic prompt list. Lyric lengths are uniform in 10..=20; ids are
/// near-uniform over the phoneme alphabet with immediate and next-nearest
/// repeats excluded, which keeps repetition corruption unambiguous.
pub fn gen_prompts(n: usize, seed: u64) -> Result<Vec<Prompt>> {
    if n == 0 {
        return Err(Error::Domain("gen_prompts needs n >= 1".into()));
    }
    let mut prompts = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, "prompt", i as u64);
        let len = rng.gen_range(LYRIC_LEN_RANGE.0..=LYRIC_LEN_RANGE.1);
        let mut lyric = Vec::with_capacity(len);
        for _ in 0..len {
            loop {
                let p = rng.gen_range(0..Vocabulary::PHONEME_COUNT);
                let lookback = lyric.len().saturating_sub(2);
                if !lyric[lookback..].contains(&p) {
                    lyric.push(p);
                    break;
                }
            }
        }
        let style = Vocabulary::style_token(rng.gen_range(0..Vocabulary::STYLE_COUNT));
        prompts.push(Prompt { prompt_id: format!("p{i:05}"), lyric, style });
    }
    Ok(prompts)
}

/// Maps generated tokens to the phonemes a listener would hear. BOS and
/// RESTs are silent, EOS stops decoding, style tokens echo their motif.
pub fn decode_tokens(tokens: &[u32], vocab: &Vocabulary) -> Result<PhonemeSeq> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if Vocabulary::is_phoneme(t) {
            out.push(t);
        } else if t == Vocabulary::BOS || t == Vocabulary::REST {
            continue;
        } else if t == Vocabulary::EOS {
            break;
        } else if Vocabulary::is_style(t) {
            out.extend_from_slice(vocab.motif(t)?);
        } else {
            return Err(Error::Vocab(t));
        }
    }
    Ok(out)
}

/// Ground-truth trajectory: BOS, the lyric with RESTs interleaved at
/// [`REST_RATE`], EOS. Decodes back to the lyric exactly.
pub fn reference_trajectory(prompt: &Prompt, seed: u64) -> TokenSeq {
    let mut rng = stream_rng(
        child_seed(seed, "ref-traj", 0),
        &prompt.prompt_id,
        fnv1a_hash(prompt.prompt_id.as_bytes()),
    );
    let mut traj = Vec::with_capacity(prompt.lyric.len() + 8);
    traj.push(Vocabulary::BOS);
    for &p in &prompt.lyric {
        if rng.gen::<f64>() < REST_RATE {
            traj.push(Vocabulary::REST);
        }
        traj.push(p);
    }
    traj.push(Vocabulary::EOS);
    traj
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub p_clean: f64,
    pub p_insert: f64,
    pub p_omit: f64,
    pub p_truncate: f64,
    pub insert_run_range: (usize, usize),
    pub omit_span_range: (usize, usize),
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            p_clean: 0.7,
            p_insert: 0.1,
            p_omit: 0.1,
            p_truncate: 0.1,
            insert_run_range: (4, 10),
            omit_span_range: (6, 14),
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_clean, self.p_insert, self.p_omit, self.p_truncate];
        if ps.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("corruption probabilities must be nonnegative".into()));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("corruption probabilities sum to {sum}, not 1")));
        }
        for (lo, hi) in [self.insert_run_range, self.omit_span_range] {
            if lo < 1 || lo > hi {
                return Err(Error::Config(format!("bad corruption range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn clean_only() -> Self {
        CorruptionSpec { p_clean: 1.0, p_insert: 0.0, p_omit: 0.0, p_truncate: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionKind {
    Clean,
    Insert,
    Omit,
    Truncate,
}

/// Applies one sampled corruption. The prefix before the edit point is
/// always preserved verbatim.
pub fn corrupt_with_kind(
    traj: &[u32],
    spec: &CorruptionSpec,
    prompt: &Prompt,
    seed: u64,
) -> (TokenSeq, CorruptionKind) {
    let mut rng = stream_rng(seed, "corrupt", fnv1a_hash(prompt.prompt_id.as_bytes()));
    let u: f64 = rng.gen();
    let kind = if u < spec.p_clean {
        CorruptionKind::Clean
    } else if u < spec.p_clean + spec.p_insert {
        CorruptionKind::Insert
    } else if u < spec.p_clean + spec.p_insert + spec.p_omit {
        CorruptionKind::Omit
    } else {
        CorruptionKind::Truncate
    };

    // Interior positions exclude BOS and EOS.
    let interior = traj.len().saturating_sub(2);
    if interior == 0 {
        return (traj.to_vec(), CorruptionKind::Clean);
    }

    let out = match kind {
        CorruptionKind::Clean => traj.to_vec(),
        CorruptionKind::Insert => {
            let pos = rng.gen_range(1..=interior);
            let mut out = traj[..pos].to_vec();
            if rng.gen::<bool>() {
                let run = rng.gen_range(spec.insert_run_range.0..=spec.insert_run_range.1);
                let repeated = traj[..pos]
                    .iter()
                    .rev()
                    .find(|&&t| Vocabulary::is_phoneme(t))
                    .copied()
                    .unwrap_or_else(|| rng.gen_range(0..Vocabulary::PHONEME_COUNT));
                out.extend(std::iter::repeat(repeated).take(run));
            } else {
                out.push(prompt.style);
            }
            out.extend_from_slice(&traj[pos..]);
            out
        }
        CorruptionKind::Omit => {
            let span = rng
                .gen_range(spec.omit_span_range.0..=spec.omit_span_range.1)
                .min(interior);
            let start = rng.gen_range(1..=traj.len() - 1 - span);
            let mut out = traj[..start].to_vec();
            out.extend_from_slice(&traj[start + span..]);
            out
        }
        CorruptionKind::Truncate => {
            let cut = rng.gen_range(1..=interior);
            let mut out = traj[..cut].to_vec();
            out.push(Vocabulary::EOS);
            out
        }
    };
    (out, kind)
}

pub fn corrupt_trajectory(
    traj: &[u32],
    spec: &CorruptionSpec,
    prompt: &Prompt,
    seed: u64,
) -> TokenSeq {
    corrupt_with_kind(traj, spec, prompt, seed).0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRow {
    #[serde(flatten)]
    pub prompt: Prompt,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_rows: usize,
    pub n_clean: usize,
    pub n_insert: usize,
    pub n_omit: usize,
    pub n_truncate: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusDataset {
    pub rows: Vec<CorpusRow>,
    pub stats: CorpusStats,
}

/// One (possibly corrupted) trajectory per prompt.
pub fn build_pretrain_corpus(
    n_prompts: usize,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<CorpusDataset> {
    spec.validate()?;
    let prompts = gen_prompts(n_prompts, child_seed(seed, "corpus-prompts", 0))?;
    let mut rows = Vec::with_capacity(prompts.len());
    let mut stats = CorpusStats::default();
    for (i, prompt) in prompts.into_iter().enumerate() {
        let traj = reference_trajectory(&prompt, seed);
        let (tokens, kind) =
            corrupt_with_kind(&traj, spec, &prompt, child_seed(seed, "corpus-corrupt", i as u64));
        match kind {
            CorruptionKind::Clean => stats.n_clean += 1,
            CorruptionKind::Insert => stats.n_insert += 1,
            CorruptionKind::Omit => stats.n_omit += 1,
            CorruptionKind::Truncate => stats.n_truncate += 1,
        }
        stats.n_rows += 1;
        rows.push(CorpusRow { prompt, tokens });
    }
    Ok(CorpusDataset { rows, stats })
}

pub fn save_corpus(path: &Path, corpus: &CorpusDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in &corpus.rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CorpusDataset> {
    let r = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str::<CorpusRow>(&line)?);
    }
    let stats = CorpusStats { n_rows: rows.len(), ..CorpusStats::default() };
    Ok(CorpusDataset { rows, stats })
}

pub fn save_prompts(path: &Path, prompts: &[Prompt]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in prompts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_prompts(path: &Path) -> Result<Vec<Prompt>> {
    let r = BufReader::new(File::open(path)?);
    let mut prompts = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        prompts.push(serde_json::from_str::<Prompt>(&line)?);
    }
    Ok(prompts)
}
