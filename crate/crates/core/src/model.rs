//! The four networks sharing one trunk: policy, frozen reference, critic,
//! and reward model.
//!
//! The trunk is a small pre-norm transformer: token + position embeddings,
//! causal single-head self-attention blocks with tanh MLPs, and a final
//! RMS norm. Heads differ per role: the LM head emits a log-distribution
//! per position, the value head a scalar per position, the reward head one
//! logistic scalar at the final token.
//!
//! Two forward implementations exist on purpose. Training records the whole
//! teacher-forced pass on the autodiff tape; sampling and scoring use a raw
//! incremental pass with a KV cache. They share no code, so agreement
//! between them is a meaningful test.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::checkpoint;
use crate::numcore::params::{Bound, ParamSet};
use crate::numcore::tape::{log_softmax_into, sigmoid, softmax_into, Tape, VarId};
use crate::numcore::tensor::Tensor;
use crate::seed::{fnv1a_hash, stream_rng, NormalSource};
use crate::task::{TokenSeq, Vocabulary};

const RMS_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Lm,
    Value,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Policy,
    Reference,
    OldPolicy,
    Critic,
    RewardModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub context_len: usize,
    pub head_kind: HeadKind,
}

impl ModelConfig {
    pub fn lm_default() -> Self {
        ModelConfig {
            vocab_size: Vocabulary::SIZE as usize,
            embed_dim: 32,
            num_layers: 2,
            mlp_hidden: 256,
            context_len: 160,
            head_kind: HeadKind::Lm,
        }
    }

    pub fn critic_default() -> Self {
        ModelConfig { head_kind: HeadKind::Value, ..Self::lm_default() }
    }

    pub fn reward_default() -> Self {
        ModelConfig { head_kind: HeadKind::Reward, ..Self::lm_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.embed_dim == 0 || self.mlp_hidden == 0 || self.num_layers == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be >= 2".into()));
        }
        Ok(())
    }

    /// Stable digest used to pair checkpoints with their architecture.
    pub fn hash(&self) -> u64 {
        fnv1a_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub role: Role,
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelHandle> {
    config.validate()?;
    let role = match config.head_kind {
        HeadKind::Lm => Role::Policy,
        HeadKind::Value => Role::Critic,
        HeadKind::Reward => Role::RewardModel,
    };
    let mut src = NormalSource::new(stream_rng(seed, "model-init", 0));
    let mut normal = |rows: usize, cols: usize| {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| INIT_STD * src.next()).collect())
    };
    let mut p = ParamSet::new();
    let d = config.embed_dim;
    let h = config.mlp_hidden;
    p.add("tok_emb", normal(config.vocab_size, d));
    p.add("pos_emb", normal(config.context_len, d));
    for l in 0..config.num_layers {
        p.add(&format!("blk{l}.attn_norm"), ones(1, d));
        p.add(&format!("blk{l}.wq"), normal(d, d));
        p.add(&format!("blk{l}.wk"), normal(d, d));
        p.add(&format!("blk{l}.wv"), normal(d, d));
        p.add(&format!("blk{l}.wo"), normal(d, d));
        p.add(&format!("blk{l}.mlp_norm"), ones(1, d));
        p.add(&format!("blk{l}.w1"), normal(d, h));
        p.add(&format!("blk{l}.b1"), Tensor::zeros(1, h));
        p.add(&format!("blk{l}.w2"), normal(h, d));
        p.add(&format!("blk{l}.b2"), Tensor::zeros(1, d));
    }
    p.add("out_norm", ones(1, d));
    match config.head_kind {
        HeadKind::Lm => {
            // Zero head: the initial policy is exactly uniform.
            p.add("head.w", Tensor::zeros(d, config.vocab_size));
            p.add("head.b", Tensor::zeros(1, config.vocab_size));
        }
        HeadKind::Value | HeadKind::Reward => {
            p.add("head.w", Tensor::zeros(d, 1));
            p.add("head.b", Tensor::zeros(1, 1));
        }
    }
    Ok(ModelHandle { config: config.clone(), params: p, role })
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
}

/// A model with a different head on a copy of the donor's trunk. The head
/// stays at its zero initialization, so a value head starts at 0 and a
/// reward head at 0.5.
pub fn init_with_trunk(donor: &ModelHandle, head_kind: HeadKind, seed: u64) -> Result<ModelHandle> {
    let mut cfg = donor.config.clone();
    cfg.head_kind = head_kind;
    let mut m = init_model(&cfg, seed)?;
    for entry in m.params.entries_mut() {
        if !entry.name.starts_with("head.") {
            entry.values = donor.params.get(&entry.name).clone();
        }
    }
    Ok(m)
}

impl ModelHandle {
    /// Deep copy that the trainers never update.
    pub fn clone_frozen(&self, role: Role) -> ModelHandle {
        assert!(
            matches!(role, Role::Reference | Role::OldPolicy),
            "frozen clones are references or old policies"
        );
        ModelHandle { config: self.config.clone(), params: self.params.clone(), role }
    }

    fn check_len(&self, total: usize) -> Result<()> {
        if total > self.config.context_len {
            return Err(Error::Length { got: total, context: self.config.context_len });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Vocab(t));
            }
        }
        Ok(())
    }

    /// Log-probability of each continuation token given the prompt and all
    /// earlier continuation tokens. Empty continuation yields an empty list.
    pub fn sequence_logprobs(&self, prompt: &[u32], continuation: &[u32]) -> Result<Vec<f64>> {
        assert_eq!(self.config.head_kind, HeadKind::Lm, "needs an LM head");
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        if prompt.is_empty() {
            return Err(Error::Batch("empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(continuation)?;
        self.check_len(prompt.len() + continuation.len() - 1)?;

        let mut runner = Runner::new(self);
        let mut out = Vec::with_capacity(continuation.len());
        let mut cursor = Vec::new();
        for &t in prompt {
            let hid = runner.step(t);
            cursor = runner.lm_logits(&hid);
        }
        let mut lp = vec![0.0; self.config.vocab_size];
        for (i, &t) in continuation.iter().enumerate() {
            log_softmax_into(&cursor, &mut lp);
            out.push(lp[t as usize]);
            if i + 1 < continuation.len() {
                let hid = runner.step(t);
                cursor = runner.lm_logits(&hid);
            }
        }
        Ok(out)
    }

    /// Ancestral sampling with temperature; stops at EOS or `max_len`
    /// generated tokens. Deterministic in `seed`.
    pub fn sample_sequence(
        &self,
        prompt: &[u32],
        max_len: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<TokenSeq> {
        assert_eq!(self.config.head_kind, HeadKind::Lm, "needs an LM head");
        if temperature <= 0.0 {
            return Err(Error::Domain(format!("temperature {temperature} must be > 0")));
        }
        if prompt.is_empty() {
            return Err(Error::Batch("empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        self.check_len(prompt.len() + 1)?;

        let budget = max_len.min(self.config.context_len - prompt.len());
        let mut rng = stream_rng(seed, "sample", 0);
        let mut runner = Runner::new(self);
        let mut logits = Vec::new();
        for &t in prompt {
            let hid = runner.step(t);
            logits = runner.lm_logits(&hid);
        }
        let mut out = Vec::with_capacity(budget);
        let mut probs = vec![0.0; self.config.vocab_size];
        for step in 0..budget {
            let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
            softmax_into(&scaled, &mut probs);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = (self.config.vocab_size - 1) as u32;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i as u32;
                    break;
                }
            }
            out.push(tok);
            if tok == Vocabulary::EOS {
                break;
            }
            if step + 1 < budget {
                let hid = runner.step(tok);
                logits = runner.lm_logits(&hid);
            }
        }
        Ok(out)
    }

    /// Argmax decoding (ties to the lowest token id).
    pub fn greedy_decode(&self, prompt: &[u32], max_len: usize) -> Result<TokenSeq> {
        assert_eq!(self.config.head_kind, HeadKind::Lm, "needs an LM head");
        if prompt.is_empty() {
            return Err(Error::Batch("empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        self.check_len(prompt.len() + 1)?;

        let budget = max_len.min(self.config.context_len - prompt.len());
        let mut runner = Runner::new(self);
        let mut logits = Vec::new();
        for &t in prompt {
            let hid = runner.step(t);
            logits = runner.lm_logits(&hid);
        }
        let mut out = Vec::with_capacity(budget);
        for step in 0..budget {
            let tok = argmax(&logits) as u32;
            out.push(tok);
            if tok == Vocabulary::EOS {
                break;
            }
            if step + 1 < budget {
                let hid = runner.step(tok);
                logits = runner.lm_logits(&hid);
            }
        }
        Ok(out)
    }

    /// State value before each generated token; V(T+1)=0 is the caller's
    /// convention in the advantage recursion.
    pub fn value_estimates(&self, prompt: &[u32], tokens: &[u32]) -> Result<Vec<f64>> {
        assert_eq!(self.config.head_kind, HeadKind::Value, "needs a value head");
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if prompt.is_empty() {
            return Err(Error::Batch("empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(tokens)?;
        self.check_len(prompt.len() + tokens.len() - 1)?;

        let mut runner = Runner::new(self);
        let mut values = Vec::with_capacity(tokens.len());
        let plen = prompt.len();
        for (i, &t) in prompt.iter().chain(tokens[..tokens.len() - 1].iter()).enumerate() {
            let hid = runner.step(t);
            if i >= plen - 1 {
                values.push(runner.scalar_head(&hid));
            }
        }
        Ok(values)
    }

    /// Predicted reward in (0,1), read at the first EOS (or the last token
    /// when no EOS is present). Padding after EOS cannot change it.
    pub fn reward_score_predict(&self, prompt: &[u32], tokens: &[u32]) -> Result<f64> {
        assert_eq!(self.config.head_kind, HeadKind::Reward, "needs a reward head");
        if tokens.is_empty() {
            return Err(Error::Batch("reward prediction needs at least one token".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Batch("empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(tokens)?;
        self.check_len(prompt.len() + tokens.len())?;

        let read_at = final_token_index(tokens);
        let mut runner = Runner::new(self);
        for &t in prompt {
            runner.step(t);
        }
        let mut score = 0.0;
        for (j, &t) in tokens.iter().enumerate() {
            let hid = runner.step(t);
            if j == read_at {
                score = sigmoid(runner.scalar_head(&hid));
                break;
            }
        }
        Ok(score)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, self.config.hash())?;
        let meta = ModelMeta { config: self.config.clone(), role: self.role };
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(meta_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelHandle> {
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let (params, hash) = checkpoint::load(path)?;
        if hash != meta.config.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {hash:#x} does not match sidecar {:#x}",
                meta.config.hash()
            )));
        }
        Ok(ModelHandle { config: meta.config, params, role: meta.role })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    role: Role,
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

/// Index of the first EOS, or the last token if none.
pub fn final_token_index(tokens: &[u32]) -> usize {
    tokens
        .iter()
        .position(|&t| t == Vocabulary::EOS)
        .unwrap_or(tokens.len() - 1)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    let _ = xs[best];
    best
}

// ---------------------------------------------------------------------------
// Raw incremental forward (no gradients)

struct Runner<'a> {
    cfg: &'a ModelConfig,
    p: &'a ParamSet,
    kcache: Vec<Vec<f64>>,
    vcache: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a> Runner<'a> {
    fn new(handle: &'a ModelHandle) -> Self {
        Runner {
            cfg: &handle.config,
            p: &handle.params,
            kcache: vec![Vec::new(); handle.config.num_layers],
            vcache: vec![Vec::new(); handle.config.num_layers],
            pos: 0,
        }
    }

    /// Feeds one token; returns the trunk output at this position.
    fn step(&mut self, token: u32) -> Vec<f64> {
        let d = self.cfg.embed_dim;
        assert!(self.pos < self.cfg.context_len, "runner past context length");
        let tok_emb = self.p.get("tok_emb");
        let pos_emb = self.p.get("pos_emb");
        let mut x: Vec<f64> = (0..d)
            .map(|i| tok_emb.at(token as usize, i) + pos_emb.at(self.pos, i))
            .collect();

        let scale = 1.0 / (d as f64).sqrt();
        for l in 0..self.cfg.num_layers {
            let xn = rmsnorm_raw(&x, self.p.get(&format!("blk{l}.attn_norm")));
            let q = vec_mat(&xn, self.p.get(&format!("blk{l}.wq")));
            let k = vec_mat(&xn, self.p.get(&format!("blk{l}.wk")));
            let v = vec_mat(&xn, self.p.get(&format!("blk{l}.wv")));
            self.kcache[l].extend_from_slice(&k);
            self.vcache[l].extend_from_slice(&v);

            let n_keys = self.pos + 1;
            let mut scores = Vec::with_capacity(n_keys);
            for j in 0..n_keys {
                let kj = &self.kcache[l][j * d..(j + 1) * d];
                let dot: f64 = q.iter().zip(kj).map(|(a, b)| a * b).sum();
                scores.push(dot * scale);
            }
            let mut probs = vec![0.0; n_keys];
            softmax_into(&scores, &mut probs);
            let mut ctx = vec![0.0; d];
            for (j, &pj) in probs.iter().enumerate() {
                let vj = &self.vcache[l][j * d..(j + 1) * d];
                for (c, &vv) in ctx.iter_mut().zip(vj) {
                    *c += pj * vv;
                }
            }
            let attn_out = vec_mat(&ctx, self.p.get(&format!("blk{l}.wo")));
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }

            let xm = rmsnorm_raw(&x, self.p.get(&format!("blk{l}.mlp_norm")));
            let mut hvec = vec_mat(&xm, self.p.get(&format!("blk{l}.w1")));
            let b1 = self.p.get(&format!("blk{l}.b1"));
            for (hi, &bi) in hvec.iter_mut().zip(&b1.data) {
                *hi = (*hi + bi).tanh();
            }
            let mut mlp_out = vec_mat(&hvec, self.p.get(&format!("blk{l}.w2")));
            let b2 = self.p.get(&format!("blk{l}.b2"));
            for (o, &bi) in mlp_out.iter_mut().zip(&b2.data) {
                *o += bi;
            }
            for (xi, o) in x.iter_mut().zip(&mlp_out) {
                *xi += o;
            }
        }
        self.pos += 1;
        rmsnorm_raw(&x, self.p.get("out_norm"))
    }

    fn lm_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut logits = vec_mat(hidden, self.p.get("head.w"));
        for (l, &b) in logits.iter_mut().zip(&self.p.get("head.b").data) {
            *l += b;
        }
        logits
    }

    fn scalar_head(&self, hidden: &[f64]) -> f64 {
        let w = self.p.get("head.w");
        let b = self.p.get("head.b").data[0];
        hidden.iter().zip(&w.data).map(|(h, w)| h * w).sum::<f64>() + b
    }
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn rmsnorm_raw(x: &[f64], gain: &Tensor) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + RMS_EPS;
    let r = (-0.5 * ms.ln()).exp();
    x.iter().zip(&gain.data).map(|(&xi, &g)| xi * r * g).collect()
}

// ---------------------------------------------------------------------------
// Tape forward (training path)

fn rmsnorm_tape(t: &mut Tape, x: VarId, gain: VarId, dim: usize) -> VarId {
    let sq = t.mul(x, x);
    let ssum = t.sum_rows(sq);
    let ms = t.scale(ssum, 1.0 / dim as f64);
    let mse = t.add_const(ms, RMS_EPS);
    // x^(-1/2) composed from log and exp
    let lg = t.log(mse);
    let half = t.scale(lg, -0.5);
    let rs = t.exp(half);
    let xn = t.mul(x, rs);
    t.mul(xn, gain)
}

/// Trunk output (T x d) for `input` token ids, recorded on the tape.
pub fn trunk_hidden_tape(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    input: &[u32],
) -> Result<VarId> {
    let n = input.len();
    if n == 0 {
        return Err(Error::Batch("empty model input".into()));
    }
    if n > cfg.context_len {
        return Err(Error::Length { got: n, context: cfg.context_len });
    }
    for &tok in input {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::Vocab(tok));
        }
    }
    let d = cfg.embed_dim;
    let tok = t.gather_rows(b.id("tok_emb"), input.to_vec());
    let pos = t.gather_rows(b.id("pos_emb"), (0..n as u32).collect());
    let mut x = t.add(tok, pos);
    let scale = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.num_layers {
        let xn = rmsnorm_tape(t, x, b.id(&format!("blk{l}.attn_norm")), d);
        let q = t.matmul(xn, b.id(&format!("blk{l}.wq")));
        let k = t.matmul(xn, b.id(&format!("blk{l}.wk")));
        let v = t.matmul(xn, b.id(&format!("blk{l}.wv")));
        let scores = t.matmul_nt(q, k);
        let scaled = t.scale(scores, scale);
        let probs = t.causal_softmax_rows(scaled);
        let ctx = t.matmul(probs, v);
        let attn_out = t.matmul(ctx, b.id(&format!("blk{l}.wo")));
        x = t.add(x, attn_out);

        let xm = rmsnorm_tape(t, x, b.id(&format!("blk{l}.mlp_norm")), d);
        let pre = t.matmul(xm, b.id(&format!("blk{l}.w1")));
        let pre_b = t.add(pre, b.id(&format!("blk{l}.b1")));
        let act = t.tanh(pre_b);
        let mlp = t.matmul(act, b.id(&format!("blk{l}.w2")));
        let mlp_b = t.add(mlp, b.id(&format!("blk{l}.b2")));
        x = t.add(x, mlp_b);
    }
    Ok(rmsnorm_tape(t, x, b.id("out_norm"), d))
}

/// Per-token log-probabilities of `continuation` after `prompt`, as a
/// (len x 1) column on the tape.
pub fn token_logprobs_tape(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    prompt: &[u32],
    continuation: &[u32],
) -> Result<VarId> {
    if continuation.is_empty() {
        return Err(Error::Batch("empty continuation".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Batch("empty prompt".into()));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&continuation[..continuation.len() - 1]);
    let hidden = trunk_hidden_tape(t, b, cfg, &input)?;
    let logits = t.matmul(hidden, b.id("head.w"));
    let logits_b = t.add(logits, b.id("head.b"));
    let logprobs = t.log_softmax_rows(logits_b);
    let plen = prompt.len();
    let idx: Vec<(u32, u32)> = continuation
        .iter()
        .enumerate()
        .map(|(i, &tok)| ((plen - 1 + i) as u32, tok))
        .collect();
    Ok(t.gather_elems(logprobs, idx))
}

/// Per-token value estimates as a (len x 1) column on the tape.
pub fn value_estimates_tape(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    prompt: &[u32],
    tokens: &[u32],
) -> Result<VarId> {
    if tokens.is_empty() {
        return Err(Error::Batch("empty tokens".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Batch("empty prompt".into()));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    let hidden = trunk_hidden_tape(t, b, cfg, &input)?;
    let vals = t.matmul(hidden, b.id("head.w"));
    let vals_b = t.add(vals, b.id("head.b"));
    let plen = prompt.len();
    let ids: Vec<u32> = (0..tokens.len()).map(|i| (plen - 1 + i) as u32).collect();
    Ok(t.gather_rows(vals_b, ids))
}

/// Reward prediction as a (1 x 1) scalar on the tape.
pub fn reward_predict_tape(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    prompt: &[u32],
    tokens: &[u32],
) -> Result<VarId> {
    if tokens.is_empty() {
        return Err(Error::Batch("empty tokens".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Batch("empty prompt".into()));
    }
    let read_at = final_token_index(tokens);
    let mut input = prompt.to_vec();
    input.extend_from_slice(&tokens[..=read_at]);
    let hidden = trunk_hidden_tape(t, b, cfg, &input)?;
    let raw = t.matmul(hidden, b.id("head.w"));
    let raw_b = t.add(raw, b.id("head.b"));
    let at = t.gather_rows(raw_b, vec![(prompt.len() + read_at) as u32]);
    Ok(t.sigmoid(at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::adam::{Adam, AdamConfig};
    use crate::task::gen_prompts;

    fn tiny_lm() -> ModelConfig {
        ModelConfig {
            vocab_size: Vocabulary::SIZE as usize,
            embed_dim: 8,
            num_layers: 2,
            mlp_hidden: 16,
            context_len: 96,
            head_kind: HeadKind::Lm,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_lm();
        let a = init_model(&cfg, 1).unwrap();
        let b = init_model(&cfg, 1).unwrap();
        let c = init_model(&cfg, 2).unwrap();
        for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(x.values.data, y.values.data, "{}", x.name);
        }
        assert_ne!(
            a.params.get("tok_emb").data,
            c.params.get("tok_emb").data
        );
        assert!(a.params.all_finite());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = tiny_lm();
        cfg.embed_dim = 0;
        assert!(init_model(&cfg, 1).is_err());
    }

    #[test]
    fn initial_policy_is_uniform() {
        let cfg = tiny_lm();
        let m = init_model(&cfg, 3).unwrap();
        let lp = m.sequence_logprobs(&[0, 5, 7], &[2, 9, Vocabulary::EOS]).unwrap();
        let uniform = -(cfg.vocab_size as f64).ln();
        for l in lp {
            assert!((l - uniform).abs() < 1e-12, "logprob {l} vs uniform {uniform}");
        }
    }

    #[test]
    fn logprob_rows_normalize() {
        let cfg = tiny_lm();
        let mut m = init_model(&cfg, 4).unwrap();
        // Give the head real weights so normalization is non-trivial.
        let mut src = NormalSource::new(stream_rng(9, "head", 0));
        for w in &mut m.params.get_mut("head.w").data {
            *w = 0.5 * src.next();
        }
        let prompt = [3u32, 1, 4];
        let cont = [5u32, 9, 2, 6];
        let lp = m.eval_probe(&prompt, &cont);
        for row in lp {
            let total: f64 = row.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "row sums to {total}");
        }
    }

    impl ModelHandle {
        /// Test helper: full log-distribution at each continuation position.
        fn eval_probe(&self, prompt: &[u32], cont: &[u32]) -> Vec<Vec<f64>> {
            let mut runner = Runner::new(self);
            let mut rows = Vec::new();
            let mut logits = Vec::new();
            for &t in prompt.iter().chain(cont[..cont.len() - 1].iter()) {
                let hid = runner.step(t);
                logits = runner.lm_logits(&hid);
                if runner.pos >= prompt.len() {
                    let mut lp = vec![0.0; logits.len()];
                    log_softmax_into(&logits, &mut lp);
                    rows.push(lp);
                }
            }
            let _ = logits;
            rows
        }
    }

    #[test]
    fn tape_and_raw_forward_agree() {
        let cfg = tiny_lm();
        let mut m = init_model(&cfg, 5).unwrap();
        // Non-trivial weights everywhere.
        let mut src = NormalSource::new(stream_rng(55, "fill", 0));
        for name in ["head.w", "head.b"] {
            for w in &mut m.params.get_mut(name).data {
                *w = 0.3 * src.next();
            }
        }
        let prompt: Vec<u32> = vec![30, 2, 17, 9, 4];
        let cont: Vec<u32> = vec![Vocabulary::BOS, 2, 26, 17, 9, 4, Vocabulary::EOS];

        let raw = m.sequence_logprobs(&prompt, &cont).unwrap();

        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let lp = token_logprobs_tape(&mut tape, &bound, &cfg, &prompt, &cont).unwrap();
        let taped = tape.value(lp).data.clone();

        assert_eq!(raw.len(), taped.len());
        for (a, b) in raw.iter().zip(&taped) {
            assert!((a - b).abs() < 1e-9, "raw {a} vs tape {b}");
        }
        assert!(raw.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn empty_continuation_scores_empty() {
        let m = init_model(&tiny_lm(), 6).unwrap();
        let lp = m.sequence_logprobs(&[1, 2], &[]).unwrap();
        assert!(lp.is_empty());
        assert_eq!(lp.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn overlength_is_rejected() {
        let m = init_model(&tiny_lm(), 7).unwrap();
        let long: Vec<u32> = vec![1; 200];
        assert!(matches!(
            m.sequence_logprobs(&long, &[1]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn hand_set_categorical_frequencies() {
        // Zero trunk effect on the head: only head.b matters.
        let cfg = ModelConfig {
            vocab_size: 2,
            embed_dim: 4,
            num_layers: 1,
            mlp_hidden: 4,
            context_len: 8,
            head_kind: HeadKind::Lm,
        };
        let mut m = init_model(&cfg, 8).unwrap();
        m.params.get_mut("head.b").data[0] = (3.0f64).ln();
        m.params.get_mut("head.b").data[1] = 0.0;
        // p = softmax([ln 3, 0]) = [0.75, 0.25]
        let mut count0 = 0;
        for k in 0..1000u64 {
            let s = m.sample_sequence(&[0], 1, 1.0, k).unwrap();
            if s[0] == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / 1000.0;
        assert!((freq - 0.75).abs() <= 0.04, "empirical frequency {freq}");
    }

    #[test]
    fn near_zero_temperature_matches_greedy() {
        let cfg = tiny_lm();
        let mut m = init_model(&cfg, 9).unwrap();
        let mut src = NormalSource::new(stream_rng(91, "fill", 0));
        for w in &mut m.params.get_mut("head.w").data {
            *w = 0.4 * src.next();
        }
        let prompt = [27u32, 3, 8, 15];
        let cold = m.sample_sequence(&prompt, 24, 1e-9, 123).unwrap();
        let greedy = m.greedy_decode(&prompt, 24).unwrap();
        assert_eq!(cold, greedy);
        // greedy is idempotent
        assert_eq!(greedy, m.greedy_decode(&prompt, 24).unwrap());
        // sampling is seed-deterministic
        assert_eq!(
            m.sample_sequence(&prompt, 24, 0.9, 7).unwrap(),
            m.sample_sequence(&prompt, 24, 0.9, 7).unwrap()
        );
    }

    #[test]
    fn clone_frozen_semantics() {
        let cfg = tiny_lm();
        let mut m = init_model(&cfg, 10).unwrap();
        let frozen = m.clone_frozen(Role::Reference);
        let prompt = [28u32, 1, 2, 3];
        let cont = [Vocabulary::BOS, 1, 2, 3, Vocabulary::EOS];
        let a = m.sequence_logprobs(&prompt, &cont).unwrap();
        let b = frozen.sequence_logprobs(&prompt, &cont).unwrap();
        // bit-exact agreement; DPO log-ratio at init is exactly 0
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        // One optimizer step on the policy leaves the clone untouched.
        let snapshot = frozen.params.get("tok_emb").data.clone();
        m.params.zero_grad();
        let _ = m
            .params
            .eval_with_gradients(|t, bnd| {
                token_logprobs_tape(t, bnd, &cfg, &prompt, &cont).map(|lp| {
                    let s = t.sum_all(lp);
                    t.neg(s)
                })
            })
            .unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &m.params);
        opt.step(&mut m.params);
        assert_eq!(frozen.params.get("tok_emb").data, snapshot);
        let c = m.sequence_logprobs(&prompt, &cont).unwrap();
        assert_ne!(a, c, "policy should have moved");
    }

    #[test]
    fn value_head_contract() {
        let cfg = ModelConfig { head_kind: HeadKind::Value, ..tiny_lm() };
        let m = init_model(&cfg, 11).unwrap();
        let prompt = [27u32, 5, 6];
        let tokens = [Vocabulary::BOS, 5, 6, Vocabulary::EOS];
        let v = m.value_estimates(&prompt, &tokens).unwrap();
        assert_eq!(v.len(), tokens.len());
        // zero-initialized head: all values exactly 0
        assert!(v.iter().all(|&x| x == 0.0));

        // raw and tape paths agree with a trained-looking head
        let mut m2 = init_model(&cfg, 12).unwrap();
        let mut src = NormalSource::new(stream_rng(13, "vh", 0));
        for w in &mut m2.params.get_mut("head.w").data {
            *w = 0.5 * src.next();
        }
        let raw = m2.value_estimates(&prompt, &tokens).unwrap();
        let mut tape = Tape::new();
        let bound = m2.params.bind(&mut tape);
        let id = value_estimates_tape(&mut tape, &bound, &cfg, &prompt, &tokens).unwrap();
        for (a, b) in raw.iter().zip(&tape.value(id).data) {
            assert!((a - b).abs() < 1e-9);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn reward_head_contract() {
        let cfg = ModelConfig { head_kind: HeadKind::Reward, ..tiny_lm() };
        let m = init_model(&cfg, 14).unwrap();
        let prompt = [29u32, 4, 9];
        let tokens = [Vocabulary::BOS, 4, 9, Vocabulary::EOS];
        // zero head => logistic(0) = 0.5
        assert_eq!(m.reward_score_predict(&prompt, &tokens).unwrap(), 0.5);

        let mut m2 = init_model(&cfg, 15).unwrap();
        let mut src = NormalSource::new(stream_rng(16, "rh", 0));
        for w in &mut m2.params.get_mut("head.w").data {
            *w = 0.5 * src.next();
        }
        let base = m2.reward_score_predict(&prompt, &tokens).unwrap();
        assert!(base > 0.0 && base < 1.0);

        // padding after EOS is invisible
        let mut padded = tokens.to_vec();
        padded.extend_from_slice(&[7, 7, 7, 7]);
        let pad_score = m2.reward_score_predict(&prompt, &padded).unwrap();
        assert_eq!(base.to_bits(), pad_score.to_bits());

        // tape path agrees
        let mut tape = Tape::new();
        let bound = m2.params.bind(&mut tape);
        let id = reward_predict_tape(&mut tape, &bound, &cfg, &prompt, &tokens).unwrap();
        assert!((tape.value(id).item() - base).abs() < 1e-9);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_lm();
        let m = init_model(&cfg, 17).unwrap();
        m.save(&path).unwrap();
        let loaded = ModelHandle::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.role, Role::Policy);
        for (a, b) in m.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.values.data.iter().zip(&b.values.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        use crate::numcore::findiff::finite_diff_check;
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            num_layers: 2,
            mlp_hidden: 8,
            context_len: 24,
            head_kind: HeadKind::Lm,
        };
        let mut m = init_model(&cfg, 20).unwrap();
        // Fill the zero head so its gradient path is exercised too.
        let mut src = NormalSource::new(stream_rng(23, "fill", 0));
        for name in ["head.w", "head.b"] {
            for w in &mut m.params.get_mut(name).data {
                *w = 0.3 * src.next();
            }
        }
        assert!(m.params.n_scalars() <= 1000, "instance has {} params", m.params.n_scalars());
        let prompt = vec![7u32, 2, 9, 1];
        let cont = vec![4u32, 8, 0, 3, 5];
        let rep = finite_diff_check(&mut m.params, 1e-4, 500, |t, b| {
            let lp = token_logprobs_tape(t, b, &cfg, &prompt, &cont)?;
            let mean = t.mean_all(lp);
            Ok(t.neg(mean))
        })
        .unwrap();
        assert!(
            rep.max_rel_err < 1e-4,
            "max rel err {} at {}[{}]",
            rep.max_rel_err,
            rep.worst_param,
            rep.worst_offset
        );
    }

    #[test]
    fn prompts_fit_context_budget() {
        let cfg = ModelConfig::lm_default();
        let prompts = gen_prompts(200, 21).unwrap();
        for p in prompts {
            let plen = p.tokens().len();
            assert!(plen + 96 <= cfg.context_len, "prompt {plen} too long");
            assert!(plen <= 21);
        }
    }
}
