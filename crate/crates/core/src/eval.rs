//! Policy evaluation: sampling over a held-out prompt set, reward bucketing,
//! report comparison, and training-curve export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::phoneme::HallucinationThresholds;
use crate::prefdata::{score_sample, GeneratedSample};
use crate::seed::child_seed;
use crate::task::Prompt;
use crate::trainers::TrainLogRow;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
    pub temperature: f64,
    pub max_gen_len: usize,
    /// Transcription noise applied before scoring; zero keeps scoring exact.
    pub noise_rate: f64,
    pub thresholds: HallucinationThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_prompt: 4,
            temperature: 1.0,
            max_gen_len: 96,
            noise_rate: 0.0,
            thresholds: HallucinationThresholds::toy(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_prompt == 0 {
            return Err(Error::Config("samples_per_prompt must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0,1]", self.noise_rate)));
        }
        Ok(())
    }
}

/// What assigns the reward written into each evaluation record. The
/// alignment-based fields (`per_raw`, `n_errors`, `hallucinated`) are always
/// computed from the ground-truth alignment.
pub enum Scorer<'a> {
    GroundTruthPer,
    RewardModel(&'a ModelHandle),
}

/// Reward distribution over one evaluation pass. `frac_low` counts rewards
/// below 0.7, `frac_mid` the closed band [0.7, 0.8], `frac_high` above 0.8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub mean_reward: f64,
    pub frac_low: f64,
    pub frac_mid: f64,
    pub frac_high: f64,
    pub halluc_rate: f64,
    pub n: usize,
}

pub fn bucket_report(records: &[GeneratedSample]) -> Result<BucketReport> {
    if records.is_empty() {
        return Err(Error::Batch("no records to bucket".into()));
    }
    let n = records.len() as f64;
    let mut low = 0usize;
    let mut mid = 0usize;
    let mut high = 0usize;
    let mut halluc = 0usize;
    let mut total = 0.0;
    for r in records {
        total += r.reward;
        if r.reward < 0.7 {
            low += 1;
        } else if r.reward <= 0.8 {
            mid += 1;
        } else {
            high += 1;
        }
        if r.hallucinated {
            halluc += 1;
        }
    }
    Ok(BucketReport {
        mean_reward: total / n,
        frac_low: low as f64 / n,
        frac_mid: mid as f64 / n,
        frac_high: high as f64 / n,
        halluc_rate: halluc as f64 / n,
        n: records.len(),
    })
}

pub struct EvalOutput {
    pub report: BucketReport,
    pub records: Vec<GeneratedSample>,
}

/// Samples `samples_per_prompt` continuations per prompt and scores each one.
/// Deterministic in `seed`: every sample draws from its own derived stream,
/// so the parallel schedule cannot change the result.
pub fn evaluate_policy(
    policy: &ModelHandle,
    prompts: &[Prompt],
    cfg: &EvalConfig,
    scorer: &Scorer<'_>,
    seed: u64,
) -> Result<EvalOutput> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Batch("no evaluation prompts".into()));
    }
    let spp = cfg.samples_per_prompt;
    let per_prompt: Result<Vec<Vec<GeneratedSample>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            (0..spp)
                .map(|k| {
                    let idx = (i * spp + k) as u64;
                    let tokens = policy.sample_sequence(
                        &p.tokens(),
                        cfg.max_gen_len,
                        cfg.temperature,
                        child_seed(seed, "eval-sample", idx),
                    )?;
                    let predicted = match scorer {
                        Scorer::GroundTruthPer => None,
                        Scorer::RewardModel(rm) => {
                            Some(rm.reward_score_predict(&p.tokens(), &tokens)?)
                        }
                    };
                    let mut rec = score_sample(
                        p,
                        k,
                        tokens,
                        cfg.noise_rate,
                        child_seed(seed, "eval-noise", idx),
                        &cfg.thresholds,
                    )?;
                    if let Some(r) = predicted {
                        rec.reward = r;
                    }
                    Ok(rec)
                })
                .collect()
        })
        .collect();
    let records: Vec<GeneratedSample> = per_prompt?.into_iter().flatten().collect();
    let report = bucket_report(&records)?;
    Ok(EvalOutput { report, records })
}

/// Change in one report field. `relative` is the signed change as a fraction
/// of the magnitude before; absent when the baseline is zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldDelta {
    pub before: f64,
    pub after: f64,
    pub absolute: f64,
    pub relative: Option<f64>,
}

fn field_delta(before: f64, after: f64) -> FieldDelta {
    let relative = if before == 0.0 { None } else { Some((after - before) / before.abs()) };
    FieldDelta { before, after, absolute: after - before, relative }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDeltas {
    pub mean_reward: FieldDelta,
    pub frac_low: FieldDelta,
    pub frac_mid: FieldDelta,
    pub frac_high: FieldDelta,
    pub halluc_rate: FieldDelta,
}

/// Field-by-field deltas between two reports of the same size.
pub fn compare_reports(before: &BucketReport, after: &BucketReport) -> Result<ReportDeltas> {
    if before.n != after.n {
        return Err(Error::Comparability(format!(
            "reports cover {} and {} samples",
            before.n, after.n
        )));
    }
    Ok(ReportDeltas {
        mean_reward: field_delta(before.mean_reward, after.mean_reward),
        frac_low: field_delta(before.frac_low, after.frac_low),
        frac_mid: field_delta(before.frac_mid, after.frac_mid),
        frac_high: field_delta(before.frac_high, after.frac_high),
        halluc_rate: field_delta(before.halluc_rate, after.halluc_rate),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn training_log_csv(log: &[TrainLogRow]) -> String {
    let mut out = String::from(
        "step,loss,mean_validation_reward,bucket_low,bucket_mid,bucket_high,chosen_logprob_sum,rejected_logprob_sum\n",
    );
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            cell(r.loss),
            cell(r.mean_validation_reward),
            cell(r.bucket_low),
            cell(r.bucket_mid),
            cell(r.bucket_high),
            cell(r.chosen_logprob_sum),
            cell(r.rejected_logprob_sum),
        );
    }
    out
}

/// One chart panel drawn with plain path elements.
fn svg_panel(out: &mut String, points: &[(f64, f64)], x0: f64, y0: f64, w: f64, h: f64, label: &str) {
    let _ = writeln!(
        out,
        r##"<path d="M{x0:.2},{y0:.2} L{x0:.2},{:.2} L{:.2},{:.2} L{:.2},{y0:.2} Z" fill="none" stroke="#888" stroke-width="1"/>"##,
        y0 + h,
        x0 + w,
        y0 + h,
        x0 + w,
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="monospace">{label}</text>"#,
        x0,
        y0 - 6.0,
    );
    if points.is_empty() {
        return;
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yspan = if ymax > ymin { ymax - ymin } else { 1.0 };
    let mut d = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        let px = x0 + (x - xmin) / xspan * w;
        let py = y0 + h - (y - ymin) / yspan * h;
        let _ = write!(d, "{}{px:.2},{py:.2}", if i == 0 { "M" } else { " L" });
    }
    let _ = writeln!(out, r##"<path d="{d}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="10" font-family="monospace">min {ymin:.4} max {ymax:.4}</text>"#,
        x0,
        y0 + h + 14.0,
    );
}

pub fn training_curves_svg(log: &[TrainLogRow]) -> String {
    let loss: Vec<(f64, f64)> =
        log.iter().filter_map(|r| r.loss.map(|l| (r.step as f64, l))).collect();
    let val: Vec<(f64, f64)> = log
        .iter()
        .filter_map(|r| r.mean_validation_reward.map(|v| (r.step as f64, v)))
        .collect();
    let mut out = String::from(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="440" viewBox="0 0 640 440">"#,
    );
    out.push('\n');
    svg_panel(&mut out, &loss, 40.0, 30.0, 560.0, 150.0, "training loss");
    svg_panel(&mut out, &val, 40.0, 250.0, 560.0, 150.0, "mean validation reward");
    out.push_str("</svg>\n");
    out
}

/// Writes the training log as `<stem>.csv` and `<stem>.svg` under `dir`.
pub fn export_curves(log: &[TrainLogRow], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if log.is_empty() {
        return Err(Error::Config("empty training log".into()));
    }
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let svg_path = dir.join(format!("{stem}.svg"));
    fs::write(&csv_path, training_log_csv(log))?;
    fs::write(&svg_path, training_curves_svg(log))?;
    Ok((csv_path, svg_path))
}

/// Per-sample reward table for downstream inspection.
pub fn export_distribution(records: &[GeneratedSample], path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,reward,per_raw,hallucinated\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.sample_id, r.reward, r.per_raw, r.hallucinated);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_report(report: &BucketReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<BucketReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, HeadKind, ModelConfig};
    use crate::task::{gen_prompts, Vocabulary};

    fn rec(id: &str, reward: f64, hallucinated: bool) -> GeneratedSample {
        GeneratedSample {
            sample_id: id.to_string(),
            prompt_id: "p".to_string(),
            tokens: vec![Vocabulary::EOS],
            hyp_phonemes: Vec::new(),
            per_raw: 1.0 - reward,
            n_errors: 0,
            reward,
            hallucinated,
        }
    }

    fn small_model(seed: u64) -> ModelHandle {
        let cfg = ModelConfig {
            vocab_size: Vocabulary::SIZE as usize,
            embed_dim: 16,
            num_layers: 1,
            mlp_hidden: 32,
            context_len: 160,
            head_kind: HeadKind::Lm,
        };
        init_model(&cfg, seed).unwrap()
    }

    #[test]
    fn buckets_partition_with_closed_mid_band() {
        let recs = vec![
            rec("a", 0.5, true),
            rec("b", 0.7, false),
            rec("c", 0.8, false),
            rec("d", 0.9, false),
        ];
        let rep = bucket_report(&recs).unwrap();
        assert_eq!(rep.n, 4);
        assert!((rep.frac_low - 0.25).abs() < 1e-12);
        assert!((rep.frac_mid - 0.50).abs() < 1e-12);
        assert!((rep.frac_high - 0.25).abs() < 1e-12);
        assert!((rep.halluc_rate - 0.25).abs() < 1e-12);
        assert!((rep.mean_reward - 0.725).abs() < 1e-12);
        assert!((rep.frac_low + rep.frac_mid + rep.frac_high - 1.0).abs() < 1e-9);
        assert!(bucket_report(&[]).is_err());
    }

    #[test]
    fn immediate_eos_policy_lands_in_the_low_bucket() {
        let mut m = small_model(5);
        let b = m.params.get_mut("head.b");
        b.data[Vocabulary::EOS as usize] = 50.0;
        let prompts = gen_prompts(3, 77).unwrap();
        let out =
            evaluate_policy(&m, &prompts, &EvalConfig::default(), &Scorer::GroundTruthPer, 9)
                .unwrap();
        assert_eq!(out.records.len(), 12);
        assert_eq!(out.report.n, 12);
        assert!((out.report.mean_reward - 0.0).abs() < 1e-12);
        assert!((out.report.frac_low - 1.0).abs() < 1e-12);
        assert!((out.report.halluc_rate - 1.0).abs() < 1e-12);
        assert!(out.records.iter().all(|r| r.tokens == vec![Vocabulary::EOS]));
        assert_eq!(out.records[0].sample_id, format!("{}-0", prompts[0].prompt_id));
    }

    #[test]
    fn evaluation_is_deterministic_in_seed() {
        let m = small_model(6);
        let prompts = gen_prompts(2, 78).unwrap();
        let cfg = EvalConfig::default();
        let a = evaluate_policy(&m, &prompts, &cfg, &Scorer::GroundTruthPer, 123).unwrap();
        let b = evaluate_policy(&m, &prompts, &cfg, &Scorer::GroundTruthPer, 123).unwrap();
        let c = evaluate_policy(&m, &prompts, &cfg, &Scorer::GroundTruthPer, 124).unwrap();
        assert_eq!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&b.records).unwrap()
        );
        assert_ne!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&c.records).unwrap()
        );
    }

    #[test]
    fn reward_model_scorer_overrides_reward_only() {
        let m = small_model(7);
        let rm = crate::model::init_with_trunk(&m, HeadKind::Reward, 8).unwrap();
        let prompts = gen_prompts(2, 79).unwrap();
        let cfg = EvalConfig::default();
        let gt = evaluate_policy(&m, &prompts, &cfg, &Scorer::GroundTruthPer, 55).unwrap();
        let scored = evaluate_policy(&m, &prompts, &cfg, &Scorer::RewardModel(&rm), 55).unwrap();
        for (a, b) in gt.records.iter().zip(&scored.records) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.per_raw, b.per_raw);
            assert_eq!(a.hallucinated, b.hallucinated);
            assert!((b.reward - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn report_deltas_match_hand_numbers() {
        let before = BucketReport {
            mean_reward: 0.771,
            frac_low: 0.173,
            frac_mid: 0.3,
            frac_high: 0.527,
            halluc_rate: 0.2,
            n: 1000,
        };
        let after = BucketReport {
            mean_reward: 0.845,
            frac_low: 0.048,
            frac_mid: 0.3,
            frac_high: 0.652,
            halluc_rate: 0.1,
            n: 1000,
        };
        let d = compare_reports(&before, &after).unwrap();
        assert!((d.mean_reward.relative.unwrap() * 100.0 - 9.60).abs() < 0.005);
        assert!((d.frac_low.absolute * 100.0 + 12.50).abs() < 0.005);
        let mut other = after.clone();
        other.n = 999;
        assert!(matches!(
            compare_reports(&before, &other),
            Err(Error::Comparability(_))
        ));
    }

    #[test]
    fn curve_export_is_deterministic_and_rejects_empty_logs() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = Vec::new();
        for s in 0..6usize {
            let mut row = TrainLogRow::at(s, Some(0.9 / (s + 1) as f64));
            if s % 2 == 0 {
                row.mean_validation_reward = Some(0.5 + 0.01 * s as f64);
                row.bucket_low = Some(0.3);
                row.bucket_mid = Some(0.4);
                row.bucket_high = Some(0.3);
            }
            log.push(row);
        }
        let (c1, s1) = export_curves(&log, &dir.path().join("a"), "run").unwrap();
        let (c2, s2) = export_curves(&log, &dir.path().join("b"), "run").unwrap();
        assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
        assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
        let csv = fs::read_to_string(&c1).unwrap();
        assert!(csv.starts_with(
            "step,loss,mean_validation_reward,bucket_low,bucket_mid,bucket_high,chosen_logprob_sum,rejected_logprob_sum\n"
        ));
        assert!(csv.lines().nth(2).unwrap().ends_with(",,,,,,"));
        assert!(matches!(export_curves(&[], dir.path(), "x"), Err(Error::Config(_))));
    }

    #[test]
    fn distribution_export_lists_each_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dist.csv");
        export_distribution(&[rec("p-0", 0.75, false), rec("p-1", 0.2, true)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,reward,per_raw,hallucinated");
        assert_eq!(lines[1], "p-0,0.75,0.25,false");
        assert_eq!(lines[2], "p-1,0.2,0.8,true");
        assert_eq!(lines.len(), 3);
    }
}
