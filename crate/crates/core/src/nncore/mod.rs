//! Transformer numerics: embedding composition, masked multi-head attention
//! with ALiBi or learnable relative biases, gated feed-forward blocks,
//! per-task heads, BCE loss with hand-written reverse-mode gradients, and an
//! incremental candidate-scoring path over a cached history.

mod attention;
mod cache;
mod checkpoint;
mod cost;
mod loss;
mod model;
mod ops;
mod params;

pub use attention::{alibi_bias, alibi_slopes, relative_distance_bucket};
pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, AnyModel, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cost::{count_cost, CostReport};
pub use loss::{bce, bce_grad, SCORE_CLAMP};
pub use model::{Model, Scores};
pub use params::ModelParams;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqbuild::{HistoryMask, OrganizationKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BiasMode {
    #[default]
    ALiBi,
    LearnableRelative,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    Fp32,
    Fp64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_multiplier: f64,
    /// Item vocabulary; one extra OOV row is appended.
    pub num_items: usize,
    pub num_tasks: usize,
    /// Longest sequence in items (history + candidates). Sizes the position
    /// and request tables and clamps relative distances.
    pub max_len: usize,
    /// Width of frozen side embeddings; 0 disables the projection.
    pub side_dim: usize,
    pub bias_mode: BiasMode,
    pub precision: Precision,
    /// Token layout the parameters were trained on; set by the trainer so a
    /// checkpoint is self-describing.
    pub organization: OrganizationKind,
    pub history_mask: HistoryMask,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_multiplier: 2.0,
            num_items: 1000,
            num_tasks: 2,
            max_len: 480,
            side_dim: 0,
            bias_mode: BiasMode::ALiBi,
            precision: Precision::Fp32,
            organization: OrganizationKind::ActionOriented,
            history_mask: HistoryMask::Causal,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Production-sized shape: 3 blocks, 8 heads, width 768.
    pub fn large() -> Self {
        Self {
            num_blocks: 3,
            num_heads: 8,
            hidden_dim: 768,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.num_heads == 0 || self.hidden_dim == 0 {
            return fail("blocks, heads and hidden_dim must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_tasks == 0 || self.num_tasks > 63 {
            return fail("num_tasks must lie in 1..=63".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(self.ffn_multiplier > 0.0) || self.ffn_dim() == 0 {
            return fail("ffn_multiplier must give a positive width".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        (self.ffn_multiplier * self.hidden_dim as f64).round() as usize
    }

    /// Entries of the relative-position table: distances in `-max_len..=max_len`.
    pub fn relative_positions(&self) -> usize {
        2 * self.max_len + 1
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}
