//! The thirteen checks this laboratory must pass before any of its results
//! are trusted: exact identities for the scoring and loss functions,
//! gradient agreement with finite differences, and end-to-end training runs
//! that must beat the pretrained starting policy. Each check is one test,
//! numbered so the report reads in order:
//!
//!   cargo test -p songlab-core --test acceptance -- --test-threads 1
//!
//! The expensive fixtures (pretrained origin policy, sampled preference
//! data) build once and are shared; the first end-to-end check to run pays
//! the cost.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use songlab_core::eval::{
    evaluate_policy, export_distribution, training_log_csv, BucketReport, EvalConfig, Scorer,
};
use songlab_core::model::{
    init_with_trunk, token_logprobs_tape, value_estimates_tape, HeadKind, ModelConfig,
    ModelHandle,
};
use songlab_core::model::init_model;
use songlab_core::numcore::{finite_diff_check, Tensor};
use songlab_core::phoneme::{align, per, reward_from_per};
use songlab_core::prefdata::{build_dataset, score_sample, GeneratedSample, PairingConfig};
use songlab_core::seed::{child_seed, fnv1a_hash, stream_rng, NormalSource};
use songlab_core::task::{build_pretrain_corpus, gen_prompts, CorruptionSpec, Prompt};
use songlab_core::trainers::{
    compute_advantages, dpo_loss, dpo_loss_from_margin, grpo_advantages, kl_k3, pretrain,
    run_trainer, select_truncated, train_reward_model, OffPolicyData, PairExample,
    PretrainConfig, RewardSource, RmConfig, RmExample, ScheduleConfig, TrainOutcome,
    TrainerKind, TrainerSettings,
};

const ROOT: u64 = 42;
const N_CORPUS: usize = 20_000;
const N_TRAIN: usize = 100;
const N_VAL: usize = 90;
/// Transcription noise used when scoring sampled generations for pairing.
const PIPELINE_NOISE: f64 = 0.02;
/// On-policy runs share one step budget so their end points are comparable.
const ON_POLICY_STEPS: usize = 60;
const ON_POLICY_VALIDATE_EVERY: usize = 10;

// ---------------------------------------------------------------- fixtures

struct Fixture {
    train: Vec<Prompt>,
    val: Vec<Prompt>,
    origin: ModelHandle,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let t0 = Instant::now();
        let corpus = build_pretrain_corpus(
            N_CORPUS,
            &CorruptionSpec::default(),
            child_seed(ROOT, "gen-corpus", 0),
        )
        .unwrap();
        let train = gen_prompts(N_TRAIN, child_seed(ROOT, "gen-train", 0)).unwrap();
        let val = gen_prompts(N_VAL, child_seed(ROOT, "gen-val", 0)).unwrap();
        let val_lyrics: std::collections::HashSet<&[u32]> =
            val.iter().map(|p| p.lyric.as_slice()).collect();
        assert!(
            train.iter().all(|p| !val_lyrics.contains(p.lyric.as_slice())),
            "train/validation lyric overlap"
        );
        let mut origin =
            init_model(&ModelConfig::lm_default(), child_seed(ROOT, "origin-init", 0)).unwrap();
        pretrain(
            &mut origin,
            &corpus,
            &PretrainConfig::default(),
            &ScheduleConfig::default(),
            &[],
            child_seed(ROOT, "pretrain", 0),
        )
        .unwrap();
        println!("fixture: origin pretrained in {:.0}s", t0.elapsed().as_secs_f64());
        Fixture { train, val, origin }
    })
}

/// The same validation stream the trainers use internally, so checkpoint
/// rewards and origin rewards are comparable.
fn validation_report(policy: &ModelHandle, val: &[Prompt], seed: u64) -> BucketReport {
    evaluate_policy(
        policy,
        val,
        &EvalConfig::default(),
        &Scorer::GroundTruthPer,
        child_seed(seed, "validate", 0),
    )
    .unwrap()
    .report
}

struct PrefData {
    samples: Vec<GeneratedSample>,
}

static PREF: OnceLock<PrefData> = OnceLock::new();

fn sample_and_score(
    origin: &ModelHandle,
    prompts: &[Prompt],
    group: usize,
    noise: f64,
) -> Vec<GeneratedSample> {
    let cfg = PairingConfig::default();
    let th = cfg.thresholds();
    let mut out = Vec::with_capacity(prompts.len() * group);
    for (i, p) in prompts.iter().enumerate() {
        for k in 0..group {
            let tokens = origin
                .sample_sequence(
                    &p.tokens(),
                    EvalConfig::default().max_gen_len,
                    1.0,
                    child_seed(ROOT, "pipeline-sample", (i * group + k) as u64),
                )
                .unwrap();
            let noise_seed = child_seed(
                ROOT,
                "pipeline-noise",
                fnv1a_hash(format!("{}-{}", p.prompt_id, k).as_bytes()),
            );
            out.push(score_sample(p, k, tokens, noise, noise_seed, &th).unwrap());
        }
    }
    out
}

fn pref_data() -> &'static PrefData {
    PREF.get_or_init(|| {
        let fx = fixture();
        let samples =
            sample_and_score(&fx.origin, &fx.train, PairingConfig::default().group_size, PIPELINE_NOISE);
        PrefData { samples }
    })
}

fn off_policy(samples: &'static [GeneratedSample]) -> (OffPolicyData<'static>, usize) {
    static PAIRS: OnceLock<Vec<songlab_core::prefdata::PreferencePair>> = OnceLock::new();
    let pairs = PAIRS.get_or_init(|| {
        build_dataset(samples, &PairingConfig::default()).unwrap().pairs
    });
    (OffPolicyData { samples, pairs }, pairs.len())
}

fn on_policy_settings() -> TrainerSettings {
    let mut s = TrainerSettings::default();
    s.schedule.validate_every = ON_POLICY_VALIDATE_EVERY;
    s.schedule.patience = usize::MAX;
    s.ppo.max_steps = ON_POLICY_STEPS;
    s.grpo.max_steps = ON_POLICY_STEPS;
    s
}

fn final_val_reward(out: &TrainOutcome) -> f64 {
    out.log
        .iter()
        .rev()
        .find_map(|r| r.mean_validation_reward)
        .expect("run logged no validation rows")
}

// ------------------------------------------------------------ 1: alignment

/// Plain recursive statement of the edit distance, memoized per pair but
/// sharing no code with the production row-table DP.
fn recursive_distance(a: &[u32], b: &[u32]) -> u32 {
    fn go(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut [u32], w: usize) -> u32 {
        let slot = i * w + j;
        if memo[slot] != u32::MAX {
            return memo[slot];
        }
        let v = if i == a.len() {
            (b.len() - j) as u32
        } else if j == b.len() {
            (a.len() - i) as u32
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo, w)
        } else {
            let sub = go(a, b, i + 1, j + 1, memo, w);
            let del = go(a, b, i + 1, j, memo, w);
            let ins = go(a, b, i, j + 1, memo, w);
            1 + sub.min(del).min(ins)
        };
        memo[slot] = v;
        v
    }
    let w = b.len() + 1;
    let mut memo = vec![u32::MAX; (a.len() + 1) * w];
    go(a, b, 0, 0, &mut memo, w)
}

fn all_sequences(max_len: usize, alphabet: u32) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![Vec::new()];
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet as usize);
        for s in &frontier {
            for sym in 0..alphabet {
                let mut t = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn c01_alignment_equals_recursive_oracle_on_all_short_pairs() {
    let t0 = Instant::now();
    let seqs = all_sequences(6, 3);
    assert_eq!(seqs.len(), 1093);
    let mut checked = 0usize;
    for a in &seqs {
        for b in &seqs {
            let dp = align(a, b).distance;
            let rec = recursive_distance(a, b);
            assert_eq!(dp, rec, "mismatch on {a:?} vs {b:?}");
            checked += 1;
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    assert_eq!(checked, 1093 * 1093);
    assert!(dt < 60.0, "took {dt:.1}s");
    println!("checked {checked} pairs in {dt:.1}s");
}

// --------------------------------------------------------------- 2: reward

#[test]
fn c02_reward_is_exactly_one_minus_clamped_per() {
    let mut rng = stream_rng(ROOT, "reward-identity", 0);
    for case in 0..1000 {
        let rlen = rng.gen_range(1..=30);
        let hlen = rng.gen_range(0..=36);
        let reference: Vec<u32> = (0..rlen).map(|_| rng.gen_range(0..24)).collect();
        let hyp: Vec<u32> = (0..hlen).map(|_| rng.gen_range(0..24)).collect();
        let p = per(&reference, &hyp).unwrap();
        let got = reward_from_per(p).unwrap();
        let dist = align(&reference, &hyp).distance as f64;
        let expect = 1.0 - (dist / reference.len() as f64).min(1.0);
        assert!(got == expect, "case {case}: {got} != {expect}");
    }
}

// ------------------------------------------------------- 3: dpo closed form

#[test]
fn c03_dpo_loss_closed_forms() {
    let cfg = ModelConfig {
        vocab_size: 12,
        embed_dim: 4,
        num_layers: 1,
        mlp_hidden: 8,
        context_len: 32,
        head_kind: HeadKind::Lm,
    };
    let mut m = init_model(&cfg, 5).unwrap();
    let mut src = NormalSource::new(stream_rng(5, "fill", 1));
    for name in ["head.w", "head.b"] {
        let t = m.params.get_mut(name);
        for v in t.data.iter_mut() {
            *v = 0.05 * src.next();
        }
    }
    let reference = m.clone_frozen(songlab_core::model::Role::Reference);
    let pair = PairExample {
        prompt: vec![1, 2, 3],
        chosen: vec![4, 5, 6, 7],
        rejected: vec![8, 9, 10],
    };
    let at_identity = dpo_loss(&m, &reference, &pair, 0.3).unwrap();
    assert!(
        (at_identity - std::f64::consts::LN_2).abs() < 1e-9,
        "loss at identical policies {at_identity}"
    );
    let at_unit_margin = dpo_loss_from_margin(1.0, 0.3);
    let expect = (1.0 + (-0.3f64).exp()).ln();
    assert!(
        (at_unit_margin - expect).abs() < 1e-9,
        "loss at unit margin {at_unit_margin} vs {expect}"
    );
}

// ------------------------------------------------------- 4: gae telescoping

#[test]
fn c04_unit_discount_advantages_telescope_to_return_minus_value() {
    let mut rng = stream_rng(ROOT, "telescope", 0);
    for _ in 0..100 {
        let n = rng.gen_range(1..=40);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, adv, returns) = compute_advantages(&rewards, &values, 1.0, 1.0).unwrap();
        let mut rtg = 0.0;
        for t in (0..n).rev() {
            rtg += rewards[t];
            assert!(
                (adv[t] - (rtg - values[t])).abs() < 1e-9,
                "A[{t}] {} vs {}",
                adv[t],
                rtg - values[t]
            );
            assert!((returns[t] - rtg).abs() < 1e-9);
        }
    }
}

// --------------------------------------------------------- 5: decay constants

#[test]
fn c05_discount_decay_constants_match_reference_values() {
    // Advantages for a single terminal reward decay geometrically toward
    // the start of the sequence; read the constants off the actual
    // estimator rather than a pow call.
    let check = |n: usize, expect: f64| {
        let mut rewards = vec![0.0; n + 1];
        rewards[n] = 1.0;
        let values = vec![0.0; n + 1];
        let (_, adv, _) = compute_advantages(&rewards, &values, 0.99, 1.0).unwrap();
        let got = adv[0];
        let rel = (got - expect).abs() / expect;
        assert!(rel < 0.01, "0.99^{n} = {got:e}, expected {expect:e} ({rel:.4} rel)");
        got
    };
    let a = check(1000, 4.32e-5);
    let b = check(3000, 8.05e-14);
    println!("0.99^1000 = {a:e}, 0.99^3000 = {b:e}");
}

// ------------------------------------------------------------ 6: grpo parts

#[test]
fn c06_group_advantages_selection_and_kl_positivity() {
    let mut rng = stream_rng(ROOT, "grpo-parts", 0);
    for _ in 0..200 {
        let n = rng.gen_range(2..=12);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let adv = grpo_advantages(&rewards, false).unwrap();
        let sum: f64 = adv.iter().sum();
        assert!(sum.abs() < 1e-9, "group advantage sum {sum}");
    }

    for trial in 0..50 {
        let n = rng.gen_range(4..=12);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("s{trial}-{i}")).collect();
        let keep = select_truncated(&rewards, &ids).unwrap();
        assert_eq!(keep.len(), 4, "kept {keep:?}");
        let mut distinct = keep.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 4, "duplicate selection {keep:?}");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rewards[a].partial_cmp(&rewards[b]).unwrap());
        for idx in [order[0], order[1], order[n - 2], order[n - 1]] {
            assert!(keep.contains(&idx), "missing extreme {idx} in {keep:?}");
        }
    }

    let mut zero_hits = 0usize;
    for i in 0..100_000 {
        let pol = rng.gen_range(-8.0..0.0);
        let rf = if i % 100 == 0 { pol } else { rng.gen_range(-8.0..0.0) };
        let k3 = kl_k3(pol, rf, false);
        assert!(k3 >= 0.0, "k3 {k3} at pol {pol} ref {rf}");
        if rf == pol {
            assert_eq!(k3, 0.0, "nonzero at unit ratio");
            zero_hits += 1;
        } else {
            assert!(k3 > 0.0, "zero away from unit ratio: pol {pol} ref {rf}");
        }
    }
    assert!(zero_hits >= 1000);
}

// -------------------------------------------------------- 7: gradient checks

#[test]
fn c07_gradients_of_all_five_losses_match_finite_differences() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 12,
        embed_dim: 4,
        num_layers: 1,
        mlp_hidden: 8,
        context_len: 32,
        head_kind: HeadKind::Lm,
    };
    let filled = |seed: u64, head: HeadKind| {
        let mut m = init_model(&ModelConfig { head_kind: head, ..cfg.clone() }, seed).unwrap();
        let mut src = NormalSource::new(stream_rng(seed, "fill", 1));
        for name in ["head.w", "head.b"] {
            let t = m.params.get_mut(name);
            for v in t.data.iter_mut() {
                *v = 0.05 * src.next();
            }
        }
        assert!(m.params.n_scalars() <= 1000, "{} params", m.params.n_scalars());
        m
    };
    let prompt = vec![1u32, 2, 3];
    let target = vec![4u32, 5, 6, 7];
    let mut worst: (f64, &str) = (0.0, "none");
    let mut note = |name: &'static str, err: f64| {
        assert!(err < 1e-4, "{name} gradient error {err}");
        if err > worst.0 {
            worst = (err, name);
        }
    };

    // Supervised NLL on chosen samples.
    let mut m = filled(11, HeadKind::Lm);
    let mcfg = m.config.clone();
    let w = 1.0 / target.len() as f64;
    let rep = finite_diff_check(&mut m.params, 3e-5, 300, |t, b| {
        let lps = token_logprobs_tape(t, b, &mcfg, &prompt, &target)?;
        let s = t.sum_all(lps);
        Ok(t.scale(s, -w))
    })
    .unwrap();
    note("supervised", rep.max_rel_err);

    // Preference loss against a frozen reference margin.
    let mut m = filled(12, HeadKind::Lm);
    let mcfg = m.config.clone();
    let chosen = vec![4u32, 5, 6, 7];
    let rejected = vec![8u32, 9, 10];
    let ref_margin = 0.7;
    let rep = finite_diff_check(&mut m.params, 3e-5, 300, |t, b| {
        let clps = token_logprobs_tape(t, b, &mcfg, &prompt, &chosen)?;
        let rlps = token_logprobs_tape(t, b, &mcfg, &prompt, &rejected)?;
        let cs = t.sum_all(clps);
        let rs = t.sum_all(rlps);
        let margin = t.sub(cs, rs);
        let d = t.add_const(margin, -ref_margin);
        let scaled = t.scale(d, -0.3);
        Ok(t.softplus(scaled))
    })
    .unwrap();
    note("preference", rep.max_rel_err);

    // Clipped surrogate with an entropy term, ratios jittered near 1.
    let mut m = filled(13, HeadKind::Lm);
    let mcfg = m.config.clone();
    let tokens = vec![4u32, 5, 6, 7];
    let base_lps = m.sequence_logprobs(&prompt, &tokens).unwrap();
    let mut jitter = NormalSource::new(stream_rng(13, "jitter", 0));
    let old_lps: Vec<f64> = base_lps.iter().map(|&v| v + 0.02 * jitter.next()).collect();
    let advantages = [0.4, -0.3, 0.2, -0.1];
    let n = tokens.len();
    let w = 1.0 / n as f64;
    let rep = finite_diff_check(&mut m.params, 3e-5, 300, |t, b| {
        let new_lps = token_logprobs_tape(t, b, &mcfg, &prompt, &tokens)?;
        let old = t.constant(Tensor::from_vec(n, 1, old_lps.clone()));
        let diff = t.sub(new_lps, old);
        let ratio = t.exp(diff);
        let adv = t.constant(Tensor::from_vec(n, 1, advantages.to_vec()));
        let unclipped = t.mul(ratio, adv);
        let clipped_ratio = t.clamp(ratio, 0.8, 1.2);
        let clipped = t.mul(clipped_ratio, adv);
        let objective = t.min_elem(unclipped, clipped);
        let neg = t.neg(objective);
        let ent = t.scale(new_lps, -0.01);
        let tok = t.add(neg, ent);
        let total = t.sum_all(tok);
        Ok(t.scale(total, w))
    })
    .unwrap();
    note("clipped surrogate", rep.max_rel_err);

    // Value regression to returns.
    let mut critic = filled(14, HeadKind::Value);
    let mcfg = critic.config.clone();
    let returns = vec![0.8, 0.2, -0.1, 0.5];
    let w = 1.0 / returns.len() as f64;
    let tokens_v = vec![4u32, 5, 6, 7];
    let rep = finite_diff_check(&mut critic.params, 3e-5, 300, |t, b| {
        let v = value_estimates_tape(t, b, &mcfg, &prompt, &tokens_v)?;
        let ret = t.constant(Tensor::from_vec(returns.len(), 1, returns.clone()));
        let diff = t.sub(v, ret);
        let sq = t.mul(diff, diff);
        let total = t.sum_all(sq);
        Ok(t.scale(total, w))
    })
    .unwrap();
    note("value regression", rep.max_rel_err);

    // Group-relative surrogate with the K3 penalty on two sequences.
    let mut m = filled(15, HeadKind::Lm);
    let mcfg = m.config.clone();
    let seqs = [vec![4u32, 5, 6], vec![7u32, 8, 9, 10]];
    let advs = [0.45, -0.35];
    let mut jitter = NormalSource::new(stream_rng(15, "jitter", 0));
    let olds: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| {
            m.sequence_logprobs(&prompt, s)
                .unwrap()
                .iter()
                .map(|&v| v + 0.02 * jitter.next())
                .collect()
        })
        .collect();
    let refs: Vec<Vec<f64>> = seqs.iter().map(|s| m.sequence_logprobs(&prompt, s).unwrap()).collect();
    let rep = finite_diff_check(&mut m.params, 3e-5, 300, |t, b| {
        let mut total = None;
        for k in 0..seqs.len() {
            let n = seqs[k].len();
            let new_lps = token_logprobs_tape(t, b, &mcfg, &prompt, &seqs[k])?;
            let old = t.constant(Tensor::from_vec(n, 1, olds[k].clone()));
            let diff = t.sub(new_lps, old);
            let ratio = t.exp(diff);
            let adv = t.constant(Tensor::from_vec(n, 1, vec![advs[k]; n]));
            let unclipped = t.mul(ratio, adv);
            let clipped_ratio = t.clamp(ratio, 0.8, 1.2);
            let clipped = t.mul(clipped_ratio, adv);
            let objective = t.min_elem(unclipped, clipped);
            let neg = t.neg(objective);
            let rf = t.constant(Tensor::from_vec(n, 1, refs[k].clone()));
            let dk = t.sub(rf, new_lps);
            let ek = t.exp(dk);
            let k3_raw = t.sub(ek, dk);
            let k3 = t.add_const(k3_raw, -1.0);
            let pen = t.scale(k3, 0.2);
            let tok = t.add(neg, pen);
            let seq_sum = t.sum_all(tok);
            let seq_mean = t.scale(seq_sum, 1.0 / n as f64);
            let contrib = t.scale(seq_mean, 0.5);
            total = Some(match total {
                None => contrib,
                Some(acc) => t.add(acc, contrib),
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    note("group surrogate", rep.max_rel_err);

    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 300.0, "took {dt:.1}s");
    println!("worst gradient error {:.2e} ({}) in {dt:.1}s", worst.0, worst.1);
}

// ---------------------------------------------------------- 8: reward model

#[test]
fn c08_reward_model_reaches_low_heldout_error() {
    let fx = fixture();
    let t0 = Instant::now();
    // Balanced corruption mix so the label distribution is spread and an
    // always-high guess cannot pass.
    let spec = CorruptionSpec {
        p_clean: 0.25,
        p_insert: 0.25,
        p_omit: 0.25,
        p_truncate: 0.25,
        ..CorruptionSpec::default()
    };
    let corpus =
        build_pretrain_corpus(10_000, &spec, child_seed(ROOT, "rm-data", 0)).unwrap();
    let th = PairingConfig::default().thresholds();
    let examples: Vec<RmExample> = corpus
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let scored = score_sample(
                &row.prompt,
                i,
                row.tokens.clone(),
                0.0,
                child_seed(ROOT, "rm-noise", i as u64),
                &th,
            )
            .unwrap();
            RmExample {
                prompt: row.prompt.tokens(),
                tokens: row.tokens.clone(),
                target: scored.reward,
            }
        })
        .collect();
    let (val, train): (Vec<_>, Vec<_>) = {
        let mut v = Vec::new();
        let mut t = Vec::new();
        for (i, ex) in examples.into_iter().enumerate() {
            if i % 5 == 4 {
                v.push(ex);
            } else {
                t.push(ex);
            }
        }
        (v, t)
    };
    assert!(val.len() >= 2000, "held-out set has {} examples", val.len());

    let init = init_with_trunk(&fx.origin, HeadKind::Reward, child_seed(ROOT, "rm-init", 0))
        .unwrap();
    let out = train_reward_model(&init, &train, &val, &RmConfig::default(), child_seed(ROOT, "rm", 0))
        .unwrap();
    let dt = t0.elapsed().as_secs_f64();
    assert!(out.aborted.is_none(), "aborted: {:?}", out.aborted);
    assert!(
        out.best_val_l1 <= 0.08,
        "held-out L1 {:.4} at step {}",
        out.best_val_l1,
        out.best_step
    );
    assert!(dt < 600.0, "took {dt:.1}s");
    println!("held-out L1 {:.4} on {} examples in {dt:.0}s", out.best_val_l1, val.len());
}

// ------------------------------------------------------------- 9: dpo e2e

#[test]
fn c09_preference_training_beats_origin_end_to_end() {
    let fx = fixture();
    let t0 = Instant::now();
    let pd = pref_data();
    let (data, n_pairs) = off_policy(&pd.samples);
    assert!(n_pairs > 0, "pairing produced nothing");

    let settings = TrainerSettings::default();
    let out = run_trainer(
        TrainerKind::Dpo,
        &settings,
        &fx.origin,
        &fx.train,
        &fx.val,
        Some(&data),
        &RewardSource::GroundTruthPer { noise_rate: 0.0 },
        ROOT,
    )
    .unwrap();
    assert!(out.aborted.is_none(), "aborted: {:?}", out.aborted);

    let origin_rep = validation_report(&fx.origin, &fx.val, ROOT);
    let best_rep = validation_report(&out.best, &fx.val, ROOT);
    let dt = t0.elapsed().as_secs_f64();
    let gain = best_rep.mean_reward - origin_rep.mean_reward;
    let low_drop = (origin_rep.frac_low - best_rep.frac_low) / origin_rep.frac_low.max(1e-12);
    println!(
        "mean reward {:.3} -> {:.3} (+{gain:.3}), frac_low {:.3} -> {:.3} ({:.0}% drop), {dt:.0}s",
        origin_rep.mean_reward,
        best_rep.mean_reward,
        origin_rep.frac_low,
        best_rep.frac_low,
        100.0 * low_drop
    );
    assert!(gain >= 0.05, "mean reward gain {gain:.4} below 0.05");
    assert!(low_drop >= 0.30, "frac_low dropped only {:.0}%", 100.0 * low_drop);
    assert!(dt < 1800.0, "took {dt:.0}s");
}

// ------------------------------------------------------ 10: on-policy wins

#[test]
fn c10_on_policy_training_beats_origin_in_two_of_three_seeds() {
    let fx = fixture();
    let settings = on_policy_settings();
    let reward = RewardSource::GroundTruthPer { noise_rate: 0.0 };
    for kind in [TrainerKind::Ppo, TrainerKind::Grpo] {
        let mut wins = 0;
        for seed in [1u64, 2, 3] {
            let out = run_trainer(
                kind,
                &settings,
                &fx.origin,
                &fx.train,
                &fx.val,
                None,
                &reward,
                seed,
            )
            .unwrap();
            assert!(out.aborted.is_none(), "{kind} seed {seed} aborted: {:?}", out.aborted);
            let origin_val = validation_report(&fx.origin, &fx.val, seed).mean_reward;
            let won = out.best_val_reward > origin_val;
            println!(
                "{kind} seed {seed}: best {:.3} vs origin {:.3} ({})",
                out.best_val_reward,
                origin_val,
                if won { "win" } else { "loss" }
            );
            wins += won as usize;
        }
        assert!(wins >= 2, "{kind} won only {wins}/3 seeds");
    }
}

// -------------------------------------------------------- 11: ppo ablations

#[test]
fn c11_reference_shaping_and_unit_lambda_help_ppo() {
    let fx = fixture();
    let reward = RewardSource::GroundTruthPer { noise_rate: 0.0 };
    let run = |alpha: f64, lambda: f64, seed: u64| -> f64 {
        let mut s = on_policy_settings();
        s.ppo.alpha = alpha;
        s.ppo.lambda = lambda;
        let out = run_trainer(
            TrainerKind::Ppo,
            &s,
            &fx.origin,
            &fx.train,
            &fx.val,
            None,
            &reward,
            seed,
        )
        .unwrap();
        assert_eq!(out.final_step, ON_POLICY_STEPS, "steps not matched");
        final_val_reward(&out)
    };

    let mut shaping_wins = 0;
    let mut lambda_wins = 0;
    for seed in [1u64, 2, 3] {
        let with_shaping = run(0.0005, 1.0, seed);
        let without_shaping = run(0.0, 1.0, seed);
        let discounted = run(0.0005, 0.99, seed);
        println!(
            "seed {seed}: shaped {with_shaping:.3} vs unshaped {without_shaping:.3}, \
             unit-lambda {with_shaping:.3} vs 0.99 {discounted:.3}"
        );
        shaping_wins += (without_shaping < with_shaping) as usize;
        lambda_wins += (discounted < with_shaping) as usize;
    }
    assert!(shaping_wins >= 2, "reference shaping won only {shaping_wins}/3");
    assert!(lambda_wins >= 2, "unit lambda won only {lambda_wins}/3");
}

// -------------------------------------------------- 12: staged margin growth

#[test]
fn c12_staged_preference_run_grows_its_margin() {
    let fx = fixture();
    let pd = pref_data();
    let (data, _) = off_policy(&pd.samples);
    let settings = TrainerSettings::default();
    let out = run_trainer(
        TrainerKind::RsThenDpo,
        &settings,
        &fx.origin,
        &fx.train,
        &fx.val,
        Some(&data),
        &RewardSource::GroundTruthPer { noise_rate: 0.0 },
        ROOT,
    )
    .unwrap();
    assert!(out.aborted.is_none(), "aborted: {:?}", out.aborted);

    let margins: Vec<(usize, f64, f64)> = out
        .log
        .iter()
        .filter_map(|r| match (r.chosen_logprob_sum, r.rejected_logprob_sum) {
            (Some(c), Some(rj)) => Some((r.step, c, rj)),
            _ => None,
        })
        .collect();
    assert!(!margins.is_empty(), "no margin probes in the log");
    let (s0, c0, r0) = margins[0];
    let target = s0 + 200;
    let &(s1, c1, r1) = margins
        .iter()
        .find(|(s, _, _)| *s == target)
        .unwrap_or_else(|| panic!("no margin probe at step {target}"));
    let m0 = c0 - r0;
    let m1 = c1 - r1;
    println!("margin {m0:.2} at step {s0} -> {m1:.2} at step {s1}; {} probes", margins.len());
    assert!(m1 > m0, "margin did not grow: {m0:.3} -> {m1:.3}");
    let chosen_logged = out.log.iter().filter(|r| r.chosen_logprob_sum.is_some()).count();
    assert!(chosen_logged >= margins.len());
}

// ------------------------------------------------------- 13: determinism

#[test]
fn c13_repeated_runs_emit_identical_csv_bytes() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let one_round = |tag: &str| -> (String, Vec<u8>) {
        let prompts = &fx.train[..10];
        let samples = sample_and_score(&fx.origin, prompts, 2, PIPELINE_NOISE);
        let pairs = build_dataset(&samples, &PairingConfig { group_size: 2, ..PairingConfig::default() })
            .unwrap()
            .pairs;
        let mut settings = TrainerSettings::default();
        settings.dpo.max_steps = 40;
        settings.schedule.validate_every = 20;
        let out = run_trainer(
            TrainerKind::Dpo,
            &settings,
            &fx.origin,
            prompts,
            &fx.val[..10],
            Some(&OffPolicyData { samples: &samples, pairs: &pairs }),
            &RewardSource::GroundTruthPer { noise_rate: 0.0 },
            7,
        )
        .unwrap();
        let csv = training_log_csv(&out.log);
        let dist_path = dir.path().join(format!("dist-{tag}.csv"));
        export_distribution(&samples, &dist_path).unwrap();
        (csv, std::fs::read(&dist_path).unwrap())
    };
    let (log_a, dist_a) = one_round("a");
    let (log_b, dist_b) = one_round("b");
    assert!(log_a == log_b, "training log CSVs differ between identical runs");
    assert!(dist_a == dist_b, "distribution CSVs differ between identical runs");
    assert!(!log_a.is_empty() && !dist_a.is_empty());
}
