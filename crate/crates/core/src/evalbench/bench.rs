use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cases::random_case;
use super::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::nncore::{count_cost, BiasMode, CostReport, Model, ModelConfig};
use crate::seqbuild::{OrganizationKind, TokenizedSequence};
use crate::trainer::quantile;

/// Fewer timed repetitions than this are flagged in the report.
pub const MIN_REPETITIONS: usize = 10;

/// Reference speedups and AUC deltas over the baseline as published for the
/// production system, keyed by variant name. Recorded, never asserted.
pub const REFERENCE: [(&str, f64, f64); 3] = [
    ("action-oriented", 0.787, -0.0003),
    ("alibi", 0.250, 0.0009),
    ("genrank", 0.948, 0.0006),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub organization: OrganizationKind,
    pub bias_mode: BiasMode,
}

/// Baseline first, then the two single-axis changes, then both.
pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "baseline",
        organization: OrganizationKind::ItemOrientedInterleaved,
        bias_mode: BiasMode::LearnableRelative,
    },
    Variant {
        name: "action-oriented",
        organization: OrganizationKind::ActionOriented,
        bias_mode: BiasMode::LearnableRelative,
    },
    Variant {
        name: "alibi",
        organization: OrganizationKind::ItemOrientedInterleaved,
        bias_mode: BiasMode::ALiBi,
    },
    Variant {
        name: "genrank",
        organization: OrganizationKind::ActionOriented,
        bias_mode: BiasMode::ALiBi,
    },
];

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            organization: self.organization,
            bias_mode: self.bias_mode,
            ..base.clone()
        }
    }

    pub fn reference(&self) -> Option<(f64, f64)> {
        REFERENCE.iter().find(|r| r.0 == self.name).map(|r| (r.1, r.2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTiming {
    pub name: String,
    pub organization: OrganizationKind,
    pub bias_mode: BiasMode,
    pub cost: CostReport,
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub p99_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub variant: String,
    pub over: String,
    /// `time_over / time_variant − 1` on medians.
    pub measured: f64,
    pub reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub history_len: usize,
    pub candidates: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub variants: Vec<VariantTiming>,
    pub speedups: Vec<Speedup>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn variant(&self, name: &str) -> Option<&VariantTiming> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn speedup(&self, name: &str) -> Option<f64> {
        self.speedups.iter().find(|s| s.variant == name).map(|s| s.measured)
    }
}

/// `time_a / time_b − 1`.
pub fn speedup(time_a: f64, time_b: f64) -> f64 {
    time_a / time_b - 1.0
}

struct Runner {
    model: Model<f32>,
    batch: Vec<(TokenizedSequence, Vec<usize>, Vec<Vec<u8>>)>,
}

impl Runner {
    fn step(&self) -> Result<f64> {
        let mut grads = self.model.params.zeros_like();
        let t0 = Instant::now();
        for (seq, pos, labels) in &self.batch {
            self.model.loss_and_grad(seq, pos, labels, 1.0, Some(&mut grads))?;
        }
        Ok(t0.elapsed().as_secs_f64())
    }
}

/// Times one forward+backward step over `batch` sequences of `n` history
/// items and `c` candidates for each variant. Repetitions are interleaved
/// across variants so drift in machine speed hits all of them alike.
pub fn bench_compare(
    base: &ModelConfig,
    n: usize,
    c: usize,
    batch: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if c == 0 || batch == 0 || repetitions == 0 {
        return Err(Error::Argument("candidates, batch and repetitions must be positive".into()));
    }
    let base = ModelConfig {
        max_len: base.max_len.max(n + c),
        ..base.clone()
    };
    let mut runners = Vec::new();
    for v in &VARIANTS {
        let config = v.apply(&base);
        let mut model = Model::<f32>::new(config)?;
        model.params.randomize(0.05, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seqs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let case = random_case(&mut rng, n, c, base.num_items, base.num_tasks, v.organization, base.max_len)?;
            let positions: Vec<usize> = case.seq.candidate_positions().collect();
            let labels = (0..c)
                .map(|_| (0..base.num_tasks).map(|_| u8::from(rng.random_bool(0.5))).collect())
                .collect();
            seqs.push((case.seq, positions, labels));
        }
        runners.push(Runner { model, batch: seqs });
    }
    // One untimed pass per variant warms caches and the allocator.
    for r in &runners {
        r.step()?;
    }
    let mut seconds = vec![Vec::with_capacity(repetitions); VARIANTS.len()];
    for _ in 0..repetitions {
        for (r, s) in runners.iter().zip(seconds.iter_mut()) {
            s.push(r.step()?);
        }
    }

    let mut warnings = Vec::new();
    if repetitions < MIN_REPETITIONS {
        warnings.push(format!(
            "only {repetitions} repetitions; at least {MIN_REPETITIONS} are needed for stable medians"
        ));
    }
    let variants: Vec<VariantTiming> = VARIANTS
        .iter()
        .zip(seconds)
        .map(|(v, s)| VariantTiming {
            name: v.name.to_string(),
            organization: v.organization,
            bias_mode: v.bias_mode,
            cost: count_cost(&v.apply(&base), n, c, v.organization),
            median_seconds: quantile(&s, 0.5).unwrap_or(f64::NAN),
            p99_seconds: quantile(&s, 0.99).unwrap_or(f64::NAN),
            seconds: s,
        })
        .collect();
    check_orderings(&variants)?;
    let baseline = variants[0].median_seconds;
    let speedups = variants[1..]
        .iter()
        .zip(&VARIANTS[1..])
        .map(|(t, v)| Speedup {
            variant: t.name.clone(),
            over: variants[0].name.clone(),
            measured: speedup(baseline, t.median_seconds),
            reference: v.reference().map(|r| r.0),
        })
        .collect();
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        history_len: n,
        candidates: c,
        batch,
        repetitions,
        variants,
        speedups,
        warnings,
    })
}

/// The action-oriented layout must be cheaper in attention and projection,
/// and ALiBi must load no bias table.
fn check_orderings(v: &[VariantTiming]) -> Result<()> {
    for pair in [(1, 0), (3, 2)] {
        let (ao, il) = (&v[pair.0].cost, &v[pair.1].cost);
        if ao.attention_flops >= il.attention_flops || ao.projection_flops >= il.projection_flops {
            return Err(Error::Validation(format!(
                "`{}` is not cheaper than `{}`",
                v[pair.0].name, v[pair.1].name
            )));
        }
    }
    for t in v.iter().filter(|t| t.bias_mode == BiasMode::ALiBi) {
        if t.cost.bias_io_elements != 0 {
            return Err(Error::Validation(format!("`{}` loads a bias table", t.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs_and_warns() {
        let cfg = ModelConfig {
            num_blocks: 1,
            num_heads: 2,
            hidden_dim: 8,
            num_items: 20,
            max_len: 16,
            ..ModelConfig::default()
        };
        let r = bench_compare(&cfg, 6, 3, 2, 3, 1).unwrap();
        assert_eq!(r.variants.len(), 4);
        assert_eq!(r.speedups.len(), 3);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.variants.iter().all(|v| v.seconds.len() == 3));
        assert_eq!(r.variant("baseline").unwrap().cost.seq_len, 15);
        assert_eq!(r.variant("genrank").unwrap().cost.seq_len, 9);
        assert_eq!(r.speedup("genrank"), r.speedups.last().map(|s| s.measured));
    }

    #[test]
    fn speedup_definition() {
        assert_eq!(speedup(3.0, 2.0), 0.5);
        assert_eq!(speedup(2.0, 2.0), 0.0);
    }
}
