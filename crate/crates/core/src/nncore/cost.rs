use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{BiasMode, ModelConfig};
use crate::seqbuild::{ActionVocabulary, OrganizationKind, TIME_BUCKETS};

/// Closed-form multiply-accumulate counts for one forward pass over one
/// sequence, and the model's parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub seq_len: u64,
    /// `blocks · 2 · L² · d` (QKᵀ and AV).
    pub attention_flops: u128,
    /// `blocks · 4 · L · d²` (Q, K, V, O).
    pub projection_flops: u128,
    /// `blocks · 3 · L · d · ffn_dim` (gate, up, down).
    pub ffn_flops: u128,
    /// Bias entries loaded per pass: `heads · L²` for a learned relative
    /// table, zero otherwise.
    pub bias_io_elements: u128,
    pub param_count: u64,
}

impl CostReport {
    pub fn attention_ratio(&self, other: &Self) -> Ratio<u128> {
        Ratio::new(self.attention_flops, other.attention_flops)
    }

    pub fn projection_ratio(&self, other: &Self) -> Ratio<u128> {
        Ratio::new(self.projection_flops, other.projection_flops)
    }

    pub fn total_flops(&self) -> u128 {
        self.attention_flops + self.projection_flops + self.ffn_flops
    }
}

fn param_count(config: &ModelConfig) -> u64 {
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim() as u64;
    let h = config.num_heads as u64;
    let embed = (config.num_items as u64 + 1) * d
        + ActionVocabulary::new(config.num_tasks).size() as u64 * d
        + (config.max_len as u64 + 1) * d
        + (config.max_len as u64 + 2) * d
        + TIME_BUCKETS as u64 * d
        + config.side_dim as u64 * d;
    let block = 4 * d + 4 * d * d + 3 * d * f;
    let head = config.num_tasks as u64 * (d + 1);
    let relative = match config.bias_mode {
        BiasMode::LearnableRelative => h * (config.relative_positions() as u64 + TIME_BUCKETS as u64),
        _ => 0,
    };
    embed + config.num_blocks as u64 * block + 2 * d + head + relative
}

/// Cost of one forward pass with `n` history items and `c` candidates.
pub fn count_cost(config: &ModelConfig, n: usize, c: usize, org: OrganizationKind) -> CostReport {
    let l = org.seq_len(n, c) as u128;
    let b = config.num_blocks as u128;
    let d = config.hidden_dim as u128;
    let f = config.ffn_dim() as u128;
    CostReport {
        seq_len: l as u64,
        attention_flops: b * 2 * l * l * d,
        projection_flops: b * 4 * l * d * d,
        ffn_flops: b * 3 * l * d * f,
        bias_io_elements: match config.bias_mode {
            BiasMode::LearnableRelative => config.num_heads as u128 * l * l,
            _ => 0,
        },
        param_count: param_count(config),
    }
}
