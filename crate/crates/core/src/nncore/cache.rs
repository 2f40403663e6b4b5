use super::attention::{attend_row, KeySource};
use super::model::{LnTrace, Model, Scores};
use super::ops::{matmul, silu};
use crate::error::{Error, Result};
use crate::seqbuild::{compose_input, AttentionMask, Token, TokenizedSequence};
use crate::Scalar;

/// Per-block keys and values of a history prefix, tied to the parameters
/// that produced them.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    fingerprint: u64,
    history: Vec<Token>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
}

impl<S: Scalar> KvCache<S> {
    pub fn history_tokens(&self) -> usize {
        self.history.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

impl<S: Scalar> Model<S> {
    /// Runs the history part of `seq` once and keeps every block's K and V.
    pub fn build_cache(&self, seq: &TokenizedSequence) -> Result<KvCache<S>> {
        let hist = seq.history_tokens();
        let tokens = &seq.tokens[..hist];
        self.check_tokens(tokens)?;
        let mask = AttentionMask::new(hist, hist, seq.mask.history_mode());
        let tr = self.trace(tokens, &mask, true);
        let (keys, values) = tr.blocks.into_iter().map(|b| (b.k, b.v)).unzip();
        Ok(KvCache {
            fingerprint: self.params.fingerprint(),
            history: tokens.to_vec(),
            keys,
            values,
        })
    }

    /// Scores each candidate as a single token appended to the cached
    /// history. Matches [`Model::forward`] on the joint sequence bit for bit.
    pub fn score_incremental(&self, cache: &KvCache<S>, candidates: &[Token]) -> Result<Scores<S>> {
        let current = self.params.fingerprint();
        if cache.fingerprint != current {
            return Err(Error::StaleCache {
                cached: cache.fingerprint,
                current,
            });
        }
        let hist = cache.history.len();
        if let Some(t) = candidates.iter().find(|t| !t.is_candidate || t.attn_pos != hist) {
            return Err(Error::Argument(format!(
                "token at attention position {} is not a candidate for a {hist}-token history",
                t.attn_pos
            )));
        }
        self.check_tokens(candidates)?;

        let d = self.config.hidden_dim;
        let f = self.config.ffn_dim();
        let geo = super::attention::Geometry {
            heads: self.config.num_heads,
            head_dim: self.config.head_dim(),
        };
        let bias = self.bias();
        let tables = self.tables();
        let keys: Vec<usize> = (0..=hist).collect();
        let mut scores_buf = Vec::with_capacity(hist + 1);

        let mut out = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let mut x = compose_input(cand, &tables);
            for (b, blk) in self.params.blocks.iter().enumerate() {
                let mut a = vec![S::zero(); d];
                LnTrace::run(&x, &blk.ln1, &mut a);
                let mut q = vec![S::zero(); d];
                let mut k = vec![S::zero(); d];
                let mut v = vec![S::zero(); d];
                matmul(&a, &blk.wq, &mut q);
                matmul(&a, &blk.wk, &mut k);
                matmul(&a, &blk.wv, &mut v);
                let src = KeySource {
                    k: &cache.keys[b],
                    v: &cache.values[b],
                    hist,
                    k_self: &k,
                    v_self: &v,
                    tokens: &cache.history,
                };
                let mut o = vec![S::zero(); d];
                let mut lse = vec![S::zero(); geo.heads];
                attend_row(&geo, &q, hist, cand, &keys, &src, &bias, &mut scores_buf, &mut o, &mut lse);
                let mut proj = vec![S::zero(); d];
                matmul(&o, &blk.wo, &mut proj);
                for (xi, pi) in x.iter_mut().zip(&proj) {
                    *xi += *pi;
                }
                let mut c = vec![S::zero(); d];
                LnTrace::run(&x, &blk.ln2, &mut c);
                let mut g = vec![S::zero(); f];
                let mut u = vec![S::zero(); f];
                matmul(&c, &blk.w_gate, &mut g);
                matmul(&c, &blk.w_up, &mut u);
                let hdn: Vec<S> = g.iter().zip(&u).map(|(g, u)| silu(*g) * *u).collect();
                let mut ffn = vec![S::zero(); d];
                matmul(&hdn, &blk.w_down, &mut ffn);
                for (xi, fi) in x.iter_mut().zip(&ffn) {
                    *xi += *fi;
                }
            }
            let mut z = vec![S::zero(); d];
            LnTrace::run(&x, &self.params.final_ln, &mut z);
            out.push(self.head(&z));
        }
        Ok(out)
    }
}
