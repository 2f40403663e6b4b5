use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bench::{speedup, Variant, VARIANTS};
use super::metrics::auc;
use super::SCHEMA_VERSION;
use crate::datagen::{generate_logs, CatalogMatrix, ExposureLog, GeneratorConfig};
use crate::error::{Error, Result};
use crate::nncore::{BiasMode, ModelConfig, Precision};
use crate::seqbuild::OrganizationKind;
use crate::trainer::{quantile, score_set, train, TrainConfig};
use crate::Scalar;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub name: String,
    pub organization: OrganizationKind,
    pub bias_mode: BiasMode,
    pub auc: f64,
    pub median_step_seconds: f64,
    pub tokens_per_sec: f64,
    pub final_loss: f64,
    /// Against the first variant; absent for the first variant itself.
    pub speedup: Option<f64>,
    pub auc_delta: Option<f64>,
    pub auc_delta_ci95: Option<(f64, f64)>,
    pub reference_speedup: Option<f64>,
    pub reference_auc_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub task: String,
    pub holdout_examples: usize,
    pub variants: Vec<VariantOutcome>,
}

struct Run {
    auc: f64,
    scores: Vec<f64>,
    labels: Vec<bool>,
    median_step: f64,
    tokens_per_sec: f64,
    final_loss: f64,
}

fn read_or_default<T: Default>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    if path.exists() {
        parse(&std::fs::read_to_string(path)?)
    } else {
        Ok(T::default())
    }
}

fn run_variant<S: Scalar>(
    logs: &[ExposureLog],
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    side: Option<&CatalogMatrix>,
) -> Result<Run> {
    let trained = train::<S>(logs, train_cfg, model_cfg, side)?;
    let cfg = TrainConfig {
        organization: trained.model.config.organization,
        history_mask: trained.model.config.history_mask,
        ..train_cfg.clone()
    };
    let (scores, labels, _) = score_set(&trained.model, &cfg.holdout_set(logs))?;
    let scores: Vec<f64> = scores.iter().map(|r| r[0]).collect();
    let labels: Vec<bool> = labels.iter().map(|r| r[0] == 1).collect();
    Ok(Run {
        auc: auc(&scores, &labels)?,
        scores,
        labels,
        median_step: trained.report.step_time_quantile(0.5).unwrap_or(f64::NAN),
        tokens_per_sec: trained.report.tokens_per_sec,
        final_loss: trained.report.final_loss().unwrap_or(f64::NAN),
    })
}

/// Paired bootstrap over held-out examples of `auc(b) − auc(a)`; 95%
/// percentile interval. Resamples with a single class are skipped.
pub fn bootstrap_auc_delta(
    a: &[f64],
    b: &[f64],
    labels: &[bool],
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if a.len() != labels.len() || b.len() != labels.len() || labels.is_empty() {
        return Err(Error::Argument("score and label lengths differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    let mut deltas = Vec::with_capacity(resamples);
    let (mut sa, mut sb, mut sl) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
    for _ in 0..resamples {
        for j in 0..n {
            let i = rng.random_range(0..n);
            sa[j] = a[i];
            sb[j] = b[i];
            sl[j] = labels[i];
        }
        match (auc(&sa, &sl), auc(&sb, &sl)) {
            (Ok(x), Ok(y)) => deltas.push(y - x),
            (Err(Error::UndefinedMetric(_)), _) | (_, Err(Error::UndefinedMetric(_))) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    match (quantile(&deltas, 0.025), quantile(&deltas, 0.975)) {
        (Some(lo), Some(hi)) => Ok((lo, hi)),
        _ => Err(Error::UndefinedMetric("no bootstrap resample had both classes".into())),
    }
}

/// Trains the four variants on one generated dataset and compares held-out
/// AUC of the first task and per-step training time against the baseline.
/// Reads `gen.toml`, `train.toml` and `model.toml` from `dir`; a missing
/// file means defaults.
pub fn compare(dir: &Path) -> Result<CompareReport> {
    let gen = read_or_default(&dir.join("gen.toml"), GeneratorConfig::from_toml)?;
    let train_cfg = read_or_default(&dir.join("train.toml"), TrainConfig::from_toml)?;
    let model_cfg = read_or_default(&dir.join("model.toml"), ModelConfig::from_toml)?;
    compare_configs(&gen, &train_cfg, &model_cfg)
}

pub fn compare_configs(gen: &GeneratorConfig, train_cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<CompareReport> {
    let data = generate_logs(gen)?;
    if model_cfg.num_tasks != data.tasks.len() {
        return Err(Error::Config(format!(
            "model has {} task heads, data has {} tasks",
            model_cfg.num_tasks,
            data.tasks.len()
        )));
    }
    let model_cfg = ModelConfig {
        num_items: gen.num_items,
        side_dim: gen.side_dim,
        ..model_cfg.clone()
    };
    let side = data.catalog.side.as_ref();
    let mut runs: Vec<(Variant, Run)> = Vec::new();
    for v in &VARIANTS {
        let tc = TrainConfig {
            organization: v.organization,
            ..train_cfg.clone()
        };
        let mc = v.apply(&model_cfg);
        let run = match mc.precision {
            Precision::Fp32 => run_variant::<f32>(&data.logs, &tc, &mc, side)?,
            Precision::Fp64 => run_variant::<f64>(&data.logs, &tc, &mc, side)?,
        };
        runs.push((*v, run));
    }
    let base = &runs[0].1;
    if runs.iter().any(|(_, r)| r.labels != base.labels) {
        return Err(Error::Validation("variants were scored on different held-out examples".into()));
    }
    let mut variants = Vec::new();
    for (i, (v, r)) in runs.iter().enumerate() {
        let against_base = i > 0;
        let ci = if against_base {
            Some(bootstrap_auc_delta(
                &base.scores,
                &r.scores,
                &base.labels,
                BOOTSTRAP_RESAMPLES,
                train_cfg.seed ^ i as u64,
            )?)
        } else {
            None
        };
        variants.push(VariantOutcome {
            name: v.name.to_string(),
            organization: v.organization,
            bias_mode: v.bias_mode,
            auc: r.auc,
            median_step_seconds: r.median_step,
            tokens_per_sec: r.tokens_per_sec,
            final_loss: r.final_loss,
            speedup: against_base.then(|| speedup(base.median_step, r.median_step)),
            auc_delta: against_base.then(|| r.auc - base.auc),
            auc_delta_ci95: ci,
            reference_speedup: v.reference().map(|x| x.0),
            reference_auc_delta: v.reference().map(|x| x.1),
        });
    }
    Ok(CompareReport {
        schema_version: SCHEMA_VERSION,
        task: data.tasks.names()[0].clone(),
        holdout_examples: base.labels.len(),
        variants,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:+.1}%", 100.0 * x))
}

fn delta(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:+.4}"))
}

impl CompareReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "| Variant | Organization | Bias | Speedup | Reference speedup | AUC ({}) | ΔAUC | 95% CI | Reference ΔAUC |",
            self.task
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for v in &self.variants {
            let ci = v
                .auc_delta_ci95
                .map_or("-".into(), |(lo, hi)| format!("[{lo:+.4}, {hi:+.4}]"));
            let _ = writeln!(
                out,
                "| {} | {:?} | {:?} | {} | {} | {:.4} | {} | {} | {} |",
                v.name,
                v.organization,
                v.bias_mode,
                pct(v.speedup),
                pct(v.reference_speedup),
                v.auc,
                delta(v.auc_delta),
                ci,
                delta(v.reference_auc_delta),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_scores_have_zero_interval() {
        let labels = [true, false, true, false, true];
        let s = [0.9, 0.2, 0.6, 0.4, 0.3];
        assert_eq!(bootstrap_auc_delta(&s, &s, &labels, 50, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn better_ranking_has_positive_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<bool> = (0..400).map(|_| rng.random_bool(0.5)).collect();
        let good: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l)) + rng.random::<f64>()).collect();
        let noise: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let (lo, hi) = bootstrap_auc_delta(&noise, &good, &labels, 200, 3).unwrap();
        assert!(lo > 0.3 && hi <= 1.0, "{lo} {hi}");
    }

    #[test]
    fn tiny_end_to_end_table() {
        let gen = GeneratorConfig {
            num_users: 12,
            num_items: 30,
            requests_per_user: 6,
            items_per_request: 3,
            seed: 5,
            ..GeneratorConfig::default()
        };
        let model = ModelConfig {
            num_blocks: 1,
            num_heads: 2,
            hidden_dim: 8,
            max_len: 32,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            max_len: 32,
            ..TrainConfig::default()
        };
        let r = compare_configs(&gen, &train, &model).unwrap();
        assert_eq!(r.variants.len(), 4);
        assert!(r.variants[0].speedup.is_none());
        assert!(r.variants[1..].iter().all(|v| v.auc_delta_ci95.is_some()));
        let md = r.to_markdown();
        assert_eq!(md.lines().count(), 6);
        assert!(md.contains("+78.7%") && md.contains("+25.0%") && md.contains("+94.8%"));
        assert!(md.contains("-0.0003") && md.contains("+0.0009") && md.contains("+0.0006"));
    }
}
