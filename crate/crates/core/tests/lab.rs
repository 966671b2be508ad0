//! Exploration bench, not part of the suite. Run explicitly:
//!   cargo test -p songlab-core --test lab -- --ignored --nocapture

use songlab_core::model::{init_model, ModelConfig};
use songlab_core::task::{build_pretrain_corpus, gen_prompts, CorruptionSpec};
use songlab_core::trainers::{pretrain, PretrainConfig, ScheduleConfig};

#[test]
#[ignore]
fn origin_pretraining_band() {
    let corpus = build_pretrain_corpus(20000, &CorruptionSpec::default(), 7).unwrap();
    println!("corpus {:?}", corpus.stats);
    let val = gen_prompts(90, 999).unwrap();
    let cfg = ModelConfig::lm_default();
    let mut policy = init_model(&cfg, 42).unwrap();
    let sched = ScheduleConfig { validate_every: 500, ..ScheduleConfig::default() };
    let pc = PretrainConfig { max_steps: 50000, lr: 1.5e-3, ..PretrainConfig::default() };

    let t0 = std::time::Instant::now();
    let log = pretrain(&mut policy, &corpus, &pc, &sched, &val, 7).unwrap();
    println!("trained {} steps in {:.1}s", log.len(), t0.elapsed().as_secs_f64());
    for row in &log {
        if let Some(r) = row.mean_validation_reward {
            println!(
                "step {:5} loss {:.4} mean_r {r:.3} frac low/mid/high {:.3}/{:.3}/{:.3}",
                row.step,
                row.loss.unwrap_or(f64::NAN),
                row.bucket_low.unwrap_or(f64::NAN),
                row.bucket_mid.unwrap_or(f64::NAN),
                row.bucket_high.unwrap_or(f64::NAN)
            );
        }
    }
}
