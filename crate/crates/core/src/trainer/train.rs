use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::samples::{LossScope, SampleGrouping, Split, TrainingSample, TrainingSet};
use super::AdamW;
use crate::datagen::{CatalogMatrix, ExposureLog};
use crate::error::{Error, Result};
use crate::evalbench::{MetricReport, SCHEMA_VERSION};
use crate::nncore::{save_checkpoint, Model, ModelConfig, ModelParams};
use crate::seqbuild::{HistoryMask, OrganizationKind};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub organization: OrganizationKind,
    pub sample_grouping: SampleGrouping,
    pub loss_scope: LossScope,
    pub history_mask: HistoryMask,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub seed: u64,
    /// Most recent history items kept per sequence, candidates included.
    pub max_len: usize,
    /// Fixed reduction order across the batch, so reruns are bit-identical.
    pub deterministic: bool,
    /// Trailing fraction of each user's requests held out for evaluation.
    pub holdout_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            organization: OrganizationKind::ActionOriented,
            sample_grouping: SampleGrouping::GroupedByUser,
            loss_scope: LossScope::CandidatesOnly,
            history_mask: HistoryMask::Causal,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            epochs: 1,
            seed: 0,
            max_len: 480,
            deterministic: true,
            holdout_frac: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return bad(format!("holdout_frac = {} must lie in [0, 1)", self.holdout_frac));
        }
        if let LossScope::IncludeHistory(f) = self.loss_scope {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("history loss fraction {f} must lie in [0, 1]"));
            }
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn training_set(&self, logs: &[ExposureLog], split: Split) -> TrainingSet {
        TrainingSet::new(
            logs,
            split,
            self.sample_grouping,
            self.organization,
            self.history_mask,
            self.loss_scope,
            self.max_len,
            self.seed,
        )
    }

    /// Sequences the optimizer sees.
    pub fn train_set(&self, logs: &[ExposureLog]) -> TrainingSet {
        self.training_set(logs, Split::Train(self.holdout_frac))
    }

    /// Held-out sequences, always candidates-only and in user order.
    pub fn holdout_set(&self, logs: &[ExposureLog]) -> TrainingSet {
        let eval = Self {
            sample_grouping: SampleGrouping::GroupedByUser,
            loss_scope: LossScope::CandidatesOnly,
            ..self.clone()
        };
        eval.training_set(logs, Split::Holdout(self.holdout_frac))
    }

    /// The model config actually trained: organization and history mask
    /// follow this config.
    pub fn resolve_model(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            organization: self.organization,
            history_mask: self.history_mask,
            ..model.clone()
        }
    }

    /// Every resolved setting of a run, seeds included.
    pub fn manifest(&self, model: &ModelConfig) -> serde_json::Value {
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "train": self,
            "model": self.resolve_model(model),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    /// Mean BCE per (position, task) label of each step.
    pub loss_trace: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub sequences: usize,
    pub tokens: usize,
    pub tokens_per_sec: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.loss_trace.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// Nearest-rank quantile of the per-step wall time.
    pub fn step_time_quantile(&self, q: f64) -> Option<f64> {
        quantile(&self.step_seconds, q)
    }
}

pub(crate) fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub struct TrainedModel<S> {
    pub model: Model<S>,
    pub report: TrainReport,
}

impl<S: Scalar> TrainedModel<S> {
    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, path)?;
        self.report.checkpoint = Some(path.to_path_buf());
        Ok(())
    }
}

struct SampleGrad<S> {
    loss: f64,
    grads: ModelParams<S>,
}

fn sample_grad<S: Scalar>(model: &Model<S>, sample: &TrainingSample, scale: S) -> Result<SampleGrad<S>> {
    let mut grads = model.params.zeros_like();
    let loss = model.loss_and_grad(&sample.seq, &sample.positions, &sample.labels, scale, Some(&mut grads))?;
    Ok(SampleGrad {
        loss: loss.to_f64().unwrap_or(f64::NAN),
        grads,
    })
}

/// Trains a fresh model on all but the held-out tail of each user.
pub fn train<S: Scalar>(
    logs: &[ExposureLog],
    config: &TrainConfig,
    model_config: &ModelConfig,
    side: Option<&CatalogMatrix>,
) -> Result<TrainedModel<S>> {
    config.validate()?;
    let model_config = config.resolve_model(model_config);
    if config.max_len > model_config.max_len {
        return Err(Error::Config(format!(
            "train max_len {} exceeds model max_len {}",
            config.max_len, model_config.max_len
        )));
    }
    let mut model = Model::<S>::new(model_config)?;
    if let Some(side) = side {
        model = model.with_side(side.clone())?;
    }
    let mut set = config.train_set(logs);
    if set.is_empty() {
        return Err(Error::Validation("no training sequences".into()));
    }
    let mut opt = AdamW::new(&model.params, config.lr, config.betas, config.weight_decay);
    let mut loss_trace = Vec::new();
    let mut step_seconds = Vec::new();
    let mut tokens = 0usize;
    let mut sequences = 0usize;
    let started = Instant::now();

    for epoch in 0..config.epochs {
        if epoch > 0 && config.sample_grouping == SampleGrouping::PointwiseShuffled {
            set.reshuffle(config.seed.wrapping_add(epoch as u64));
        }
        let mut start = 0;
        while start < set.len() {
            let t0 = Instant::now();
            let end = (start + config.batch_size).min(set.len());
            let batch: Vec<TrainingSample> = (start..end).map(|i| set.get(i)).collect::<Result<_>>()?;
            start = end;
            let labels: usize = batch.iter().map(|s| s.positions.len()).sum::<usize>() * model.config.num_tasks;
            if labels == 0 {
                continue;
            }
            let scale = S::one() / S::c(labels as f64);
            let m = &model;
            let (loss, grads) = if config.deterministic {
                let parts: Vec<SampleGrad<S>> =
                    batch.par_iter().map(|s| sample_grad(m, s, scale)).collect::<Result<_>>()?;
                let mut it = parts.into_iter();
                let mut acc = it.next().expect("non-empty batch");
                for p in it {
                    acc.loss += p.loss;
                    acc.grads.add_assign(&p.grads);
                }
                (acc.loss, acc.grads)
            } else {
                let acc = batch
                    .par_iter()
                    .map(|s| sample_grad(m, s, scale))
                    .try_reduce_with(|mut a, b| {
                        a.loss += b.loss;
                        a.grads.add_assign(&b.grads);
                        Ok(a)
                    })
                    .expect("non-empty batch")?;
                (acc.loss, acc.grads)
            };
            let step = loss_trace.len();
            let mean = loss / labels as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("loss {mean} in epoch {epoch}"),
                });
            }
            opt.step(&mut model.params, &grads);
            if let Some((name, _)) = model
                .params
                .tensors()
                .into_iter()
                .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    step,
                    msg: format!("non-finite values in `{name}` after update"),
                });
            }
            loss_trace.push(mean);
            step_seconds.push(t0.elapsed().as_secs_f64());
            tokens += batch.iter().map(|s| s.seq.len()).sum::<usize>();
            sequences += batch.len();
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(TrainedModel {
        model,
        report: TrainReport {
            schema_version: SCHEMA_VERSION,
            loss_trace,
            step_seconds,
            sequences,
            tokens,
            tokens_per_sec: if elapsed > 0.0 { tokens as f64 / elapsed } else { 0.0 },
            checkpoint: None,
        },
    })
}

/// Candidate scores and labels over a set of sequences, in set order.
pub(crate) fn score_set<S: Scalar>(
    model: &Model<S>,
    set: &TrainingSet,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<u8>>, Vec<u64>)> {
    let per_seq: Vec<(Vec<Vec<f64>>, Vec<Vec<u8>>, u64)> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let sample = set.get(i)?;
            let scores = model.forward(&sample.seq)?;
            let scores = scores
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
                .collect();
            Ok((scores, sample.candidate_labels().to_vec(), sample.user_id))
        })
        .collect::<Result<_>>()?;
    let (mut scores, mut labels, mut users) = (Vec::new(), Vec::new(), Vec::new());
    for (s, l, u) in per_seq {
        users.extend(std::iter::repeat_n(u, s.len()));
        scores.extend(s);
        labels.extend(l);
    }
    Ok((scores, labels, users))
}

/// AUC and GAUC per task over the held-out tail of each user.
pub fn evaluate_holdout<S: Scalar>(
    model: &Model<S>,
    logs: &[ExposureLog],
    config: &TrainConfig,
    task_names: &[String],
) -> Result<MetricReport> {
    evaluate(model, logs, config, task_names, Split::Holdout(config.holdout_frac))
}

/// AUC and GAUC per task over the candidates of every request in `split`,
/// laid out as the model was trained.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    logs: &[ExposureLog],
    config: &TrainConfig,
    task_names: &[String],
    split: Split,
) -> Result<MetricReport> {
    if task_names.len() != model.config.num_tasks {
        return Err(Error::Argument(format!(
            "{} task names for a {}-task model",
            task_names.len(),
            model.config.num_tasks
        )));
    }
    let cfg = TrainConfig {
        organization: model.config.organization,
        history_mask: model.config.history_mask,
        sample_grouping: SampleGrouping::GroupedByUser,
        loss_scope: LossScope::CandidatesOnly,
        ..config.clone()
    };
    let set = cfg.training_set(logs, split);
    let (scores, labels, users) = score_set(model, &set)?;
    MetricReport::compute(task_names, &scores, &labels, &users)
}
