//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use genrank::datagen::ExposureLog;
use genrank::nncore::{BiasMode, Model, ModelConfig, ModelParams};
use genrank::seqbuild::{build_sequence, OrganizationKind, TokenizedSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// O(n²) AUC: fraction of (positive, negative) pairs ranked correctly, ties ½.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut twice_wins: u64 = 0;
    let mut pairs: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice_wins += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then(|| twice_wins as f64 / (2.0 * pairs as f64))
}

/// Random chronological history for one user: `n` items over requests of
/// 1–4 items each.
pub fn random_history(rng: &mut ChaCha8Rng, n: usize, num_items: u64, tasks: usize) -> Vec<ExposureLog> {
    let mut ts = 1_000_000i64;
    let mut out = Vec::with_capacity(n);
    let mut left_in_request = 0;
    let mut request = 0;
    for _ in 0..n {
        if left_in_request == 0 {
            ts += rng.random_range(1..5_000);
            left_in_request = rng.random_range(1..=4);
            request += 1;
        }
        left_in_request -= 1;
        out.push(ExposureLog {
            user_id: 0,
            request_id: request,
            ts,
            item_id: rng.random_range(0..num_items),
            labels: (0..tasks).map(|_| u8::from(rng.random_bool(0.4))).collect(),
        });
    }
    out
}

pub fn random_sequence(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    num_items: u64,
    tasks: usize,
    org: OrganizationKind,
    max_len: usize,
) -> (Vec<ExposureLog>, Vec<u64>, i64, TokenizedSequence) {
    let hist = random_history(rng, n, num_items, tasks);
    let cands: Vec<u64> = (0..c).map(|_| rng.random_range(0..num_items + 3)).collect();
    let now = hist.last().map_or(1_000_000, |l| l.ts) + rng.random_range(0..10_000);
    let seq = build_sequence(&hist, &cands, now, org, max_len).unwrap();
    (hist, cands, now, seq)
}

pub fn small_config(bias_mode: BiasMode, side_dim: usize) -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_multiplier: 2.0,
        num_items: 12,
        num_tasks: 2,
        max_len: 24,
        side_dim,
        bias_mode,
        seed: 9,
        ..ModelConfig::default()
    }
}

/// Largest per-tensor relative error between analytic and central-difference
/// gradients of the summed loss, `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn gradcheck_max_rel(
    model: &Model<f64>,
    batch: &[(TokenizedSequence, Vec<usize>, Vec<Vec<u8>>)],
    h: f64,
) -> (f64, String) {
    let total_loss = |m: &Model<f64>| -> f64 {
        batch
            .iter()
            .map(|(s, p, l)| m.loss_and_grad(s, p, l, 1.0, None).unwrap())
            .sum()
    };
    let mut analytic: ModelParams<f64> = model.params.zeros_like();
    for (s, p, l) in batch {
        model.loss_and_grad(s, p, l, 1.0, Some(&mut analytic)).unwrap();
    }
    let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for (ti, name) in names.iter().enumerate() {
        let a = analytic.tensors()[ti].1.data().to_vec();
        let mut numeric = vec![0.0; a.len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = probe.params.tensors()[ti].1.data()[i];
            probe.params.tensors_mut()[ti].1.data_mut()[i] = orig + h;
            let up = total_loss(&probe);
            probe.params.tensors_mut()[ti].1.data_mut()[i] = orig - h;
            let down = total_loss(&probe);
            probe.params.tensors_mut()[ti].1.data_mut()[i] = orig;
            *num = (up - down) / (2.0 * h);
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-8);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
