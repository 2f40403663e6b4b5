use super::attention::{attention_backward, attention_forward, scatter_relative_grad, Bias, Geometry};
use super::loss::{bce, bce_grad};
use super::ops::{dot, layer_norm, layer_norm_backward, matmul, matmul_backward, silu, silu_grad};
use super::params::{BlockParams, LayerNormParams, ModelParams};
use super::{ModelConfig, Precision};
use crate::datagen::CatalogMatrix;
use crate::error::{Error, Result};
use crate::seqbuild::{compose_input, ActionVocabulary, AttentionMask, EmbeddingTables, Token, TokenizedSequence, TIME_BUCKETS};
use crate::Scalar;

/// Pre-sigmoid scores, one row per scored position, one column per task.
pub type Scores<S> = Vec<Vec<S>>;

/// Configuration, learnable parameters and the frozen side embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
    pub side: Option<CatalogMatrix>,
}

pub(crate) struct LnTrace<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

impl<S: Scalar> LnTrace<S> {
    pub(crate) fn run(x: &[S], ln: &LayerNormParams<S>, out: &mut [S]) -> Self {
        let d = ln.gain.numel();
        let mut t = Self {
            xhat: vec![S::zero(); x.len()],
            rstd: vec![S::zero(); x.len() / d],
        };
        layer_norm(x, ln.gain.data(), ln.bias.data(), out, &mut t.xhat, &mut t.rstd);
        t
    }

    fn backward(&self, dy: &[S], ln: &LayerNormParams<S>, grad: &mut LayerNormParams<S>, dx: &mut [S]) {
        layer_norm_backward(
            dy,
            &self.xhat,
            &self.rstd,
            ln.gain.data(),
            grad.gain.data_mut(),
            grad.bias.data_mut(),
            dx,
        );
    }
}

pub(crate) struct BlockTrace<S> {
    pub ln1: LnTrace<S>,
    pub a: Vec<S>,
    pub q: Vec<S>,
    pub k: Vec<S>,
    pub v: Vec<S>,
    pub lse: Vec<S>,
    pub o: Vec<S>,
    pub ln2: LnTrace<S>,
    pub c: Vec<S>,
    pub g: Vec<S>,
    pub u: Vec<S>,
    pub hdn: Vec<S>,
}

pub(crate) struct Trace<'a, S> {
    pub blocks: Vec<BlockTrace<S>>,
    pub final_ln: LnTrace<S>,
    /// Final normalized hidden states, `[L, d]`.
    pub z: Vec<S>,
    pub bias: Bias<'a, S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model; `config.precision` is set from `S`.
    pub fn new(mut config: ModelConfig) -> Result<Self> {
        config.precision = if S::DTYPE == f32::DTYPE {
            Precision::Fp32
        } else {
            Precision::Fp64
        };
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Self {
            config,
            params,
            side: None,
        })
    }

    /// Attaches frozen side embeddings, one row per item.
    pub fn with_side(mut self, side: CatalogMatrix) -> Result<Self> {
        if side.dim != self.config.side_dim {
            return Err(Error::Config(format!(
                "side embeddings have width {}, model expects {}",
                side.dim, self.config.side_dim
            )));
        }
        self.side = Some(side);
        Ok(self)
    }

    pub fn vocab(&self) -> ActionVocabulary {
        ActionVocabulary::new(self.config.num_tasks)
    }

    pub fn tables(&self) -> EmbeddingTables<'_, S> {
        let p = &self.params;
        EmbeddingTables {
            item: &p.item,
            action: &p.action,
            position: &p.position,
            request: &p.request,
            time: &p.time,
            side: match (&self.side, &p.side_proj) {
                (Some(s), Some(proj)) => Some((s, proj)),
                _ => None,
            },
            vocab: self.vocab(),
        }
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            heads: self.config.num_heads,
            head_dim: self.config.head_dim(),
        }
    }

    pub(crate) fn bias(&self) -> Bias<'_, S> {
        Bias::new(
            self.config.bias_mode,
            self.config.num_heads,
            self.config.max_len,
            self.params.relative.as_ref(),
        )
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        let p = &self.params;
        for (i, t) in tokens.iter().enumerate() {
            if t.position >= p.position.rows() || t.request >= p.request.rows() || t.time_bucket >= TIME_BUCKETS {
                return Err(Error::Config(format!(
                    "token {i} indices (position {}, request {}, time {}) exceed tables ({}, {}, {})",
                    t.position,
                    t.request,
                    t.time_bucket,
                    p.position.rows(),
                    p.request.rows(),
                    TIME_BUCKETS
                )));
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[Token]) -> Vec<S> {
        let tables = self.tables();
        let mut x = Vec::with_capacity(tokens.len() * self.config.hidden_dim);
        for t in tokens {
            x.extend(compose_input(t, &tables));
        }
        x
    }

    /// Runs the block stack on `x` (`[L, d]`), updating it in place.
    pub(crate) fn run_blocks<'a>(
        &'a self,
        tokens: &[Token],
        mask: &AttentionMask,
        x: &mut [S],
        keep_trace: bool,
    ) -> (Vec<BlockTrace<S>>, Bias<'a, S>) {
        let d = self.config.hidden_dim;
        let f = self.config.ffn_dim();
        let l = tokens.len();
        let geo = self.geometry();
        let mut bias = self.bias();
        bias.materialize(geo.heads, tokens);
        let mut traces = Vec::new();
        for blk in &self.params.blocks {
            let mut a = vec![S::zero(); l * d];
            let ln1 = LnTrace::run(x, &blk.ln1, &mut a);
            let mut q = vec![S::zero(); l * d];
            let mut k = vec![S::zero(); l * d];
            let mut v = vec![S::zero(); l * d];
            matmul(&a, &blk.wq, &mut q);
            matmul(&a, &blk.wk, &mut k);
            matmul(&a, &blk.wv, &mut v);
            let mut o = vec![S::zero(); l * d];
            let mut lse = vec![S::zero(); l * geo.heads];
            attention_forward(&geo, tokens, mask, &bias, &q, &k, &v, &mut o, &mut lse);
            let mut proj = vec![S::zero(); l * d];
            matmul(&o, &blk.wo, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }
            let mut c = vec![S::zero(); l * d];
            let ln2 = LnTrace::run(x, &blk.ln2, &mut c);
            let mut g = vec![S::zero(); l * f];
            let mut u = vec![S::zero(); l * f];
            matmul(&c, &blk.w_gate, &mut g);
            matmul(&c, &blk.w_up, &mut u);
            let hdn: Vec<S> = g.iter().zip(&u).map(|(g, u)| silu(*g) * *u).collect();
            let mut ffn = vec![S::zero(); l * d];
            matmul(&hdn, &blk.w_down, &mut ffn);
            for (xi, fi) in x.iter_mut().zip(&ffn) {
                *xi += *fi;
            }
            if keep_trace {
                traces.push(BlockTrace {
                    ln1,
                    a,
                    q,
                    k,
                    v,
                    lse,
                    o,
                    ln2,
                    c,
                    g,
                    u,
                    hdn,
                });
            }
        }
        (traces, bias)
    }

    pub(crate) fn trace<'a>(&'a self, tokens: &[Token], mask: &AttentionMask, keep: bool) -> Trace<'a, S> {
        let d = self.config.hidden_dim;
        let mut x = self.embed(tokens);
        let (blocks, bias) = self.run_blocks(tokens, mask, &mut x, keep);
        let mut z = vec![S::zero(); tokens.len() * d];
        let final_ln = LnTrace::run(&x, &self.params.final_ln, &mut z);
        Trace {
            blocks,
            final_ln,
            z,
            bias,
        }
    }

    pub(crate) fn head(&self, z: &[S]) -> Vec<S> {
        (0..self.config.num_tasks)
            .map(|k| dot(z, self.params.head_w.row(k)) + self.params.head_b.data()[k])
            .collect()
    }

    fn check(&self, seq: &TokenizedSequence) -> Result<()> {
        if seq.mask.len() != seq.len() {
            return Err(Error::Config(format!(
                "mask is {}x{} for {} tokens",
                seq.mask.len(),
                seq.mask.len(),
                seq.len()
            )));
        }
        self.check_tokens(&seq.tokens)
    }

    /// Scores at `positions`.
    pub fn forward_positions(&self, seq: &TokenizedSequence, positions: &[usize]) -> Result<Scores<S>> {
        self.check(seq)?;
        if let Some(p) = positions.iter().find(|&&p| p >= seq.len()) {
            return Err(Error::Argument(format!("position {p} outside sequence of length {}", seq.len())));
        }
        let d = self.config.hidden_dim;
        let tr = self.trace(&seq.tokens, &seq.mask, false);
        Ok(positions.iter().map(|&p| self.head(&tr.z[p * d..(p + 1) * d])).collect())
    }

    /// Per-candidate, per-task pre-sigmoid scores.
    pub fn forward(&self, seq: &TokenizedSequence) -> Result<Scores<S>> {
        let positions: Vec<usize> = seq.candidate_positions().collect();
        self.forward_positions(seq, &positions)
    }

    /// Head outputs at every position.
    pub fn forward_all(&self, seq: &TokenizedSequence) -> Result<Scores<S>> {
        let positions: Vec<usize> = (0..seq.len()).collect();
        self.forward_positions(seq, &positions)
    }

    /// Summed BCE over `positions × tasks` against `labels` (one row per
    /// position). With `grads`, accumulates `scale ·` d loss / d params.
    pub fn loss_and_grad(
        &self,
        seq: &TokenizedSequence,
        positions: &[usize],
        labels: &[Vec<u8>],
        scale: S,
        grads: Option<&mut ModelParams<S>>,
    ) -> Result<S> {
        self.check(seq)?;
        if positions.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} loss positions but {} label rows",
                positions.len(),
                labels.len()
            )));
        }
        for row in labels {
            if row.len() != self.config.num_tasks {
                return Err(Error::Validation(format!(
                    "{} labels for {} tasks",
                    row.len(),
                    self.config.num_tasks
                )));
            }
            if let Some(v) = row.iter().find(|v| **v > 1) {
                return Err(Error::Validation(format!("label {v} is not binary")));
            }
        }
        if let Some(p) = positions.iter().find(|&&p| p >= seq.len()) {
            return Err(Error::Argument(format!("position {p} outside sequence of length {}", seq.len())));
        }

        let d = self.config.hidden_dim;
        let tr = self.trace(&seq.tokens, &seq.mask, grads.is_some());
        let mut total = S::zero();
        let mut dscores = Vec::with_capacity(positions.len());
        for (&p, row) in positions.iter().zip(labels) {
            let s = self.head(&tr.z[p * d..(p + 1) * d]);
            let mut ds = Vec::with_capacity(s.len());
            for (sk, &y) in s.iter().zip(row) {
                total += bce(*sk, y == 1);
                ds.push(bce_grad(*sk, y == 1) * scale);
            }
            dscores.push(ds);
        }
        if let Some(grads) = grads {
            self.backward(seq, &tr, positions, &dscores, grads);
        }
        Ok(total)
    }

    fn backward(
        &self,
        seq: &TokenizedSequence,
        tr: &Trace<'_, S>,
        positions: &[usize],
        dscores: &[Vec<S>],
        grads: &mut ModelParams<S>,
    ) {
        let d = self.config.hidden_dim;
        let f = self.config.ffn_dim();
        let l = seq.len();
        let p = &self.params;
        let geo = self.geometry();

        let mut dz = vec![S::zero(); l * d];
        for (&pos, ds) in positions.iter().zip(dscores) {
            let z = &tr.z[pos * d..(pos + 1) * d];
            let dzr = &mut dz[pos * d..(pos + 1) * d];
            for (k, &g) in ds.iter().enumerate() {
                for (o, w) in dzr.iter_mut().zip(p.head_w.row(k)) {
                    *o += g * *w;
                }
                for (gw, zi) in grads.head_w.row_mut(k).iter_mut().zip(z) {
                    *gw += g * *zi;
                }
                grads.head_b.data_mut()[k] += g;
            }
        }
        let mut dx = vec![S::zero(); l * d];
        tr.final_ln.backward(&dz, &p.final_ln, &mut grads.final_ln, &mut dx);

        let mut dbias = tr.bias.is_relative().then(|| vec![S::zero(); geo.heads * l * l]);
        for ((blk, bt), gb) in p.blocks.iter().zip(&tr.blocks).zip(grads.blocks.iter_mut()).rev() {
            self.block_backward(blk, bt, gb, &tr.bias, seq, &mut dx, dbias.as_deref_mut(), f);
        }
        if let (Some(db), Some(rel)) = (&dbias, grads.relative.as_mut()) {
            scatter_relative_grad(&seq.tokens, &seq.mask, self.config.max_len, db, rel);
        }

        self.embed_backward(&seq.tokens, &dx, grads);
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        blk: &BlockParams<S>,
        bt: &BlockTrace<S>,
        gb: &mut BlockParams<S>,
        bias: &Bias<'_, S>,
        seq: &TokenizedSequence,
        dx: &mut [S],
        dbias: Option<&mut [S]>,
        f: usize,
    ) {
        let d = self.config.hidden_dim;
        let l = seq.len();
        let geo = self.geometry();

        // feed-forward branch: dx is the gradient of the block output
        let mut dhdn = vec![S::zero(); l * f];
        matmul_backward(&bt.hdn, &blk.w_down, dx, Some(&mut dhdn), &mut gb.w_down);
        let mut dg = vec![S::zero(); l * f];
        let mut du = vec![S::zero(); l * f];
        for i in 0..l * f {
            dg[i] = dhdn[i] * bt.u[i] * silu_grad(bt.g[i]);
            du[i] = dhdn[i] * silu(bt.g[i]);
        }
        let mut dc = vec![S::zero(); l * d];
        matmul_backward(&bt.c, &blk.w_gate, &dg, Some(&mut dc), &mut gb.w_gate);
        matmul_backward(&bt.c, &blk.w_up, &du, Some(&mut dc), &mut gb.w_up);
        bt.ln2.backward(&dc, &blk.ln2, &mut gb.ln2, dx);

        // attention branch
        let mut dout = vec![S::zero(); l * d];
        matmul_backward(&bt.o, &blk.wo, dx, Some(&mut dout), &mut gb.wo);
        let mut dq = vec![S::zero(); l * d];
        let mut dk = vec![S::zero(); l * d];
        let mut dv = vec![S::zero(); l * d];
        attention_backward(
            &geo,
            &seq.tokens,
            &seq.mask,
            bias,
            &bt.q,
            &bt.k,
            &bt.v,
            &bt.lse,
            &dout,
            &mut dq,
            &mut dk,
            &mut dv,
            dbias,
        );
        let mut da = vec![S::zero(); l * d];
        matmul_backward(&bt.a, &blk.wq, &dq, Some(&mut da), &mut gb.wq);
        matmul_backward(&bt.a, &blk.wk, &dk, Some(&mut da), &mut gb.wk);
        matmul_backward(&bt.a, &blk.wv, &dv, Some(&mut da), &mut gb.wv);
        bt.ln1.backward(&da, &blk.ln1, &mut gb.ln1, dx);
    }

    fn embed_backward(&self, tokens: &[Token], dx: &[S], grads: &mut ModelParams<S>) {
        let d = self.config.hidden_dim;
        let tables = self.tables();
        let vocab = self.vocab();
        let add = |row: &mut [S], g: &[S]| {
            for (o, v) in row.iter_mut().zip(g) {
                *o += *v;
            }
        };
        for (t, g) in tokens.iter().zip(dx.chunks_exact(d)) {
            if let Some(item) = t.item {
                let row = tables.item_row(item);
                add(grads.item.row_mut(row), g);
                if let (Some(side), Some(gproj)) = (&self.side, grads.side_proj.as_mut()) {
                    if row < side.rows {
                        for (pi, s) in side.row(row).iter().enumerate() {
                            let s = S::c(f64::from(*s));
                            for (o, v) in gproj.row_mut(pi).iter_mut().zip(g) {
                                *o += s * *v;
                            }
                        }
                    }
                }
            }
            for code in vocab.codes(t.action) {
                add(grads.action.row_mut(code), g);
            }
            add(grads.position.row_mut(tables.position_row(t.position)), g);
            add(grads.request.row_mut(tables.request_row(t.request)), g);
            add(grads.time.row_mut(t.time_bucket), g);
        }
    }
}
