use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BiasMode, ModelConfig};
use crate::seqbuild::{ActionVocabulary, TIME_BUCKETS};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], S::one()),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub ln1: LayerNormParams<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln2: LayerNormParams<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

/// Learned relative attention bias, shared by all blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBiasParams<S> {
    /// `[heads, 2 * max_len + 1]`, indexed by clamped signed distance.
    pub position: Tensor<S>,
    /// `[heads, TIME_BUCKETS]`, indexed by bucketed |time gap|.
    pub time: Tensor<S>,
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub item: Tensor<S>,
    /// Base "observed" row, one positive row per task, then the MASK row.
    pub action: Tensor<S>,
    pub position: Tensor<S>,
    pub request: Tensor<S>,
    pub time: Tensor<S>,
    pub side_proj: Option<Tensor<S>>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_ln: LayerNormParams<S>,
    /// `[tasks, hidden]`.
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    pub relative: Option<RelativeBiasParams<S>>,
}

const EMBED_STD: f64 = 0.02;

impl<S: Scalar> ModelParams<S> {
    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let vocab = ActionVocabulary::new(config.num_tasks);
        let block = || BlockParams {
            ln1: LayerNormParams::new(d),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2: LayerNormParams::new(d),
            w_gate: Tensor::zeros(&[d, f]),
            w_up: Tensor::zeros(&[d, f]),
            w_down: Tensor::zeros(&[f, d]),
        };
        Self {
            item: Tensor::zeros(&[config.num_items + 1, d]),
            action: Tensor::zeros(&[vocab.size(), d]),
            position: Tensor::zeros(&[config.max_len + 1, d]),
            request: Tensor::zeros(&[config.max_len + 2, d]),
            time: Tensor::zeros(&[TIME_BUCKETS, d]),
            side_proj: (config.side_dim > 0).then(|| Tensor::zeros(&[config.side_dim, d])),
            blocks: (0..config.num_blocks).map(|_| block()).collect(),
            final_ln: LayerNormParams::new(d),
            head_w: Tensor::zeros(&[config.num_tasks, d]),
            head_b: Tensor::zeros(&[config.num_tasks]),
            relative: (config.bias_mode == BiasMode::LearnableRelative).then(|| RelativeBiasParams {
                position: Tensor::zeros(&[config.num_heads, config.relative_positions()]),
                time: Tensor::zeros(&[config.num_heads, TIME_BUCKETS]),
            }),
        }
    }

    /// Embeddings ~ N(0, 0.02²), projections ~ N(0, 1/fan_in), layer norms at
    /// identity, heads and relative-bias tables at zero.
    pub fn init(config: &ModelConfig) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        p.item = Tensor::randn(p.item.shape(), EMBED_STD, &mut rng);
        p.action = Tensor::randn(p.action.shape(), EMBED_STD, &mut rng);
        p.position = Tensor::randn(p.position.shape(), EMBED_STD, &mut rng);
        p.request = Tensor::randn(p.request.shape(), EMBED_STD, &mut rng);
        p.time = Tensor::randn(p.time.shape(), EMBED_STD, &mut rng);
        if let Some(proj) = &mut p.side_proj {
            *proj = Tensor::randn(proj.shape(), EMBED_STD, &mut rng);
        }
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        for b in &mut p.blocks {
            b.wq = Tensor::randn(&[d, d], std_d, &mut rng);
            b.wk = Tensor::randn(&[d, d], std_d, &mut rng);
            b.wv = Tensor::randn(&[d, d], std_d, &mut rng);
            b.wo = Tensor::randn(&[d, d], std_d, &mut rng);
            b.w_gate = Tensor::randn(&[d, f], std_d, &mut rng);
            b.w_up = Tensor::randn(&[d, f], std_d, &mut rng);
            b.w_down = Tensor::randn(&[f, d], std_f, &mut rng);
        }
        p
    }

    /// Overwrites every tensor, layer norms and heads included, with
    /// N(0, std²) noise (gains centred on 1). Used by gradient checks.
    pub fn randomize(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.tensors_mut() {
            let noise = Tensor::<S>::randn(t.shape(), std, &mut rng);
            let gain = name.ends_with(".gain");
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v = if gain { S::one() + *n } else { *n };
            }
        }
    }

    /// Stable (name, tensor) listing; checkpoint record order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("embed.item".into(), &self.item),
            ("embed.action".into(), &self.action),
            ("embed.position".into(), &self.position),
            ("embed.request".into(), &self.request),
            ("embed.time".into(), &self.time),
        ];
        if let Some(p) = &self.side_proj {
            out.push(("embed.side_proj".into(), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            out.push((n("ln1.gain"), &b.ln1.gain));
            out.push((n("ln1.bias"), &b.ln1.bias));
            out.push((n("attn.wq"), &b.wq));
            out.push((n("attn.wk"), &b.wk));
            out.push((n("attn.wv"), &b.wv));
            out.push((n("attn.wo"), &b.wo));
            out.push((n("ln2.gain"), &b.ln2.gain));
            out.push((n("ln2.bias"), &b.ln2.bias));
            out.push((n("ffn.w_gate"), &b.w_gate));
            out.push((n("ffn.w_up"), &b.w_up));
            out.push((n("ffn.w_down"), &b.w_down));
        }
        out.push(("final_ln.gain".into(), &self.final_ln.gain));
        out.push(("final_ln.bias".into(), &self.final_ln.bias));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        if let Some(r) = &self.relative {
            out.push(("rel_bias.position".into(), &r.position));
            out.push(("rel_bias.time".into(), &r.time));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("embed.item".into(), &mut self.item),
            ("embed.action".into(), &mut self.action),
            ("embed.position".into(), &mut self.position),
            ("embed.request".into(), &mut self.request),
            ("embed.time".into(), &mut self.time),
        ];
        if let Some(p) = &mut self.side_proj {
            out.push(("embed.side_proj".into(), p));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            out.push((n("ln1.gain"), &mut b.ln1.gain));
            out.push((n("ln1.bias"), &mut b.ln1.bias));
            out.push((n("attn.wq"), &mut b.wq));
            out.push((n("attn.wk"), &mut b.wk));
            out.push((n("attn.wv"), &mut b.wv));
            out.push((n("attn.wo"), &mut b.wo));
            out.push((n("ln2.gain"), &mut b.ln2.gain));
            out.push((n("ln2.bias"), &mut b.ln2.bias));
            out.push((n("ffn.w_gate"), &mut b.w_gate));
            out.push((n("ffn.w_up"), &mut b.w_up));
            out.push((n("ffn.w_down"), &mut b.w_down));
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln.gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln.bias));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        if let Some(r) = &mut self.relative {
            out.push(("rel_bias.position".into(), &mut r.position));
            out.push(("rel_bias.time".into(), &mut r.time));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill_zero();
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (name, t) in self.tensors() {
            feed(name.as_bytes());
            for d in t.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in t.data() {
                v.write_le(&mut buf);
            }
            feed(&buf);
        }
        h
    }
}
