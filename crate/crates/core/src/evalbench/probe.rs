use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cases::{random_case, random_history};
use super::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::nncore::{alibi_bias, AnyModel, Model, ModelConfig, ModelParams};
use crate::seqbuild::{Action, HistoryMask, OrganizationKind, TokenizedSequence};
use crate::trainer::{LossScope, SampleGrouping};
use crate::Scalar;

pub const PROBES: [&str; 7] = [
    "causality",
    "candidate-isolation",
    "label-leakage",
    "kv-equivalence",
    "gradcheck",
    "alibi-monotone",
    "length-law",
];

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    pub probe: String,
    pub seed: u64,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs the named invariant on seeded random inputs against `model`.
pub fn probe(model: &AnyModel, name: &str, seed: u64) -> Result<ProbeReport> {
    match model {
        AnyModel::F32(m) => probe_typed(m, name, seed),
        AnyModel::F64(m) => probe_typed(m, name, seed),
    }
}

pub fn probe_typed<S: Scalar>(model: &Model<S>, name: &str, seed: u64) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Bit-identity is the contract in fp64; fp32 gets a small absolute slack.
    let exact = if S::DTYPE == f64::DTYPE { 0.0 } else { 1e-5 };
    let (trials, worst, tolerance) = match name {
        "causality" => (20, causality(model, &mut rng)?, 0.0),
        "candidate-isolation" => (10, candidate_isolation(model, &mut rng)?, exact),
        "label-leakage" => (10, label_leakage(model, &mut rng)?, 0.0),
        "kv-equivalence" => (20, kv_equivalence(model, &mut rng)?, exact),
        "gradcheck" => (1, gradcheck(&model.config, seed)?, GRADCHECK_TOLERANCE),
        "alibi-monotone" => (model.config.num_heads, alibi_monotone(model.config.num_heads), 0.0),
        "length-law" => (100, length_law(&mut rng)?, 0.0),
        other => return Err(Error::UnknownProbe(other.to_string())),
    };
    Ok(ProbeReport {
        schema_version: SCHEMA_VERSION,
        probe: name.to_string(),
        seed,
        trials,
        max_violation: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

fn max_abs_diff<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| {
            if x.to_bits_eq(*y) {
                0.0
            } else {
                (*x - *y).abs().to_f64().unwrap_or(f64::INFINITY).max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<S: Scalar> BitsEq for S {
    fn to_bits_eq(self, other: Self) -> bool {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        self.write_le(&mut a);
        other.write_le(&mut b);
        a == b
    }
}

fn random_org(rng: &mut ChaCha8Rng) -> OrganizationKind {
    OrganizationKind::ALL[rng.random_range(0..OrganizationKind::ALL.len())]
}

fn case_for<S: Scalar>(
    model: &Model<S>,
    rng: &mut ChaCha8Rng,
    max_n: usize,
    c: usize,
) -> Result<TokenizedSequence> {
    let cfg = &model.config;
    let n = rng.random_range(0..=max_n.min(cfg.max_len.saturating_sub(c)));
    let case = random_case(rng, n, c, cfg.num_items, cfg.num_tasks, cfg.organization, cfg.max_len)?;
    Ok(case.seq.with_history_mask(HistoryMask::Causal))
}

/// Perturbs every token from a random cut onwards; rows before the cut
/// must not move.
fn causality<S: Scalar>(model: &Model<S>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = &model.config;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = rng.random_range(1..=4.min(cfg.max_len));
        let seq = case_for(model, rng, 40, c)?;
        let cut = rng.random_range(1..=seq.len().max(1)).min(seq.len() - 1).max(1);
        let mut other = seq.clone();
        for t in &mut other.tokens[cut..] {
            if let Some(item) = t.item {
                t.item = Some((item + 1) % cfg.num_items as u64);
            }
            if let Action::Observed(bits) = t.action {
                t.action = Action::Observed(bits ^ 1);
            }
        }
        let a = model.forward_all(&seq)?;
        let b = model.forward_all(&other)?;
        worst = worst.max(max_abs_diff(&a[..cut], &b[..cut]));
    }
    Ok(worst)
}

/// Scores each of 32 candidates alone and inside the full slate.
fn candidate_isolation<S: Scalar>(model: &Model<S>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = &model.config;
    let c = 32.min(cfg.max_len);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(0..=cfg.max_len.saturating_sub(c).min(64));
        let case = random_case(rng, n, c, cfg.num_items, cfg.num_tasks, cfg.organization, cfg.max_len)?;
        let joint = model.forward(&case.seq)?;
        for (j, cand) in case.candidates.iter().enumerate() {
            let alone = crate::seqbuild::build_sequence(
                &case.history,
                &[*cand],
                case.now,
                cfg.organization,
                cfg.max_len,
            )?;
            let single = model.forward(&alone)?;
            worst = worst.max(max_abs_diff(&joint[j..=j], &single));
        }
    }
    Ok(worst)
}

/// Flips the labels of the scored request; neither tokens nor scores may
/// change.
fn label_leakage<S: Scalar>(model: &Model<S>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = &model.config;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(2..=cfg.max_len.clamp(2, 40));
        let logs = random_history(rng, n, cfg.num_items, cfg.num_tasks);
        let mut flipped = logs.clone();
        let last = flipped.last().expect("non-empty").request_id;
        for l in flipped.iter_mut().filter(|l| l.request_id == last) {
            for v in &mut l.labels {
                *v ^= 1;
            }
        }
        let score = |logs: &[crate::datagen::ExposureLog]| -> Result<(TokenizedSequence, Vec<Vec<S>>)> {
            let set = crate::trainer::TrainingSet::new(
                logs,
                crate::trainer::Split::All,
                SampleGrouping::GroupedByUser,
                cfg.organization,
                cfg.history_mask,
                LossScope::CandidatesOnly,
                cfg.max_len,
                0,
            );
            let sample = set.get(set.len() - 1)?;
            let scores = model.forward(&sample.seq)?;
            Ok((sample.seq, scores))
        };
        let (seq_a, a) = score(&logs)?;
        let (seq_b, b) = score(&flipped)?;
        if seq_a != seq_b {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

/// Cached-prefix incremental scoring against the full forward pass.
fn kv_equivalence<S: Scalar>(model: &Model<S>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = &model.config;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = rng.random_range(1..=16.min(cfg.max_len));
        let n = rng.random_range(0..=cfg.max_len.saturating_sub(c).min(64));
        let case = random_case(rng, n, c, cfg.num_items, cfg.num_tasks, cfg.organization, cfg.max_len)?;
        let seq = case.seq.with_history_mask(cfg.history_mask);
        let full = model.forward(&seq)?;
        let cache = model.build_cache(&seq)?;
        let inc = model.score_incremental(&cache, &seq.tokens[seq.history_tokens()..])?;
        worst = worst.max(max_abs_diff(&full, &inc));
    }
    Ok(worst)
}

/// Central differences on a fresh small fp64 model with the same bias,
/// layout and mask as `config`. Returns the worst per-tensor relative error
/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn gradcheck(config: &ModelConfig, seed: u64) -> Result<f64> {
    let small = ModelConfig {
        num_blocks: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_multiplier: 2.0,
        num_items: 12,
        max_len: 24,
        side_dim: 0,
        seed,
        ..config.clone()
    };
    let mut model = Model::<f64>::new(small.clone())?;
    model.params.randomize(0.3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::new();
    for _ in 0..2 {
        let n = rng.random_range(3..=8);
        let c = rng.random_range(2..=4);
        let case = random_case(&mut rng, n, c, small.num_items, small.num_tasks, small.organization, small.max_len)?;
        let seq = case.seq.with_history_mask(small.history_mask);
        let positions: Vec<usize> = (0..seq.len()).collect();
        let labels = positions
            .iter()
            .map(|_| (0..small.num_tasks).map(|_| u8::from(rng.random_bool(0.5))).collect())
            .collect::<Vec<Vec<u8>>>();
        batch.push((seq, positions, labels));
    }
    let loss = |m: &Model<f64>| -> Result<f64> {
        batch.iter().map(|(s, p, l)| m.loss_and_grad(s, p, l, 1.0, None)).sum()
    };
    let mut analytic: ModelParams<f64> = model.params.zeros_like();
    for (s, p, l) in &batch {
        model.loss_and_grad(s, p, l, 1.0, Some(&mut analytic))?;
    }
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (i, ai) in a.iter().enumerate() {
            let orig = model.params.tensors()[ti].1.data()[i];
            model.params.tensors_mut()[ti].1.data_mut()[i] = orig + GRADCHECK_STEP;
            let up = loss(&model)?;
            model.params.tensors_mut()[ti].1.data_mut()[i] = orig - GRADCHECK_STEP;
            let down = loss(&model)?;
            model.params.tensors_mut()[ti].1.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * GRADCHECK_STEP);
            diff += (ai - num) * (ai - num);
            na += ai * ai;
            nn += num * num;
        }
        worst = worst.max(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8));
    }
    Ok(worst)
}

/// Bias must fall strictly with distance for every head, and steeper heads
/// come first. Returns the largest amount by which that fails.
fn alibi_monotone(heads: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut fail = |amount: f64| worst = worst.max(amount.max(f64::MIN_POSITIVE));
    for h in 0..heads {
        for d in 0..64 {
            let near = alibi_bias(h, heads, 100, 100 - d);
            let far = alibi_bias(h, heads, 100, 99 - d);
            if far >= near {
                fail(far - near);
            }
            let mirrored = alibi_bias(h, heads, 100 - d, 100);
            if mirrored != near {
                fail((mirrored - near).abs());
            }
        }
        if h + 1 < heads {
            let (a, b) = (alibi_bias(h, heads, 10, 0), alibi_bias(h + 1, heads, 10, 0));
            if a >= b {
                fail(a - b);
            }
        }
    }
    worst
}

/// Counts sequences whose length breaks `N + C` or `2N + C`.
fn length_law(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut violations = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(0..=480);
        let c = rng.random_range(1..=64);
        let org = random_org(rng);
        let case = random_case(rng, n, c, 50, 2, org, n + c)?;
        let expected = match org {
            OrganizationKind::ActionOriented => n + c,
            OrganizationKind::ItemOrientedInterleaved => 2 * n + c,
        };
        violations += usize::from(case.seq.len() != expected);
    }
    Ok(violations as f64)
}
