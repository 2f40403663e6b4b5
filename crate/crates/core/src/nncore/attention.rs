//! Masked multi-head attention with additive position biases.

use super::ops::{axpy, dot};
use super::params::RelativeBiasParams;
use super::BiasMode;
use crate::seqbuild::{time_bucket, AttentionMask, Token};
use crate::Scalar;

/// Per-head ALiBi slopes `2^(-8h/H)` for `h = 1..=H`.
pub fn alibi_slopes(num_heads: usize) -> Vec<f64> {
    (1..=num_heads)
        .map(|h| (-8.0 * h as f64 / num_heads as f64).exp2())
        .collect()
}

/// ALiBi bias for zero-based `head` of `num_heads`: `-slope * |q - k|`.
pub fn alibi_bias(head: usize, num_heads: usize, q: usize, k: usize) -> f64 {
    -alibi_slopes(num_heads)[head] * q.abs_diff(k) as f64
}

/// Column of the relative-position table for signed distance `q - k`,
/// clamped to `±max_len`.
pub fn relative_distance_bucket(q: usize, k: usize, max_len: usize) -> usize {
    let d = (q as i64 - k as i64).clamp(-(max_len as i64), max_len as i64);
    (d + max_len as i64) as usize
}

/// Softmax weights below `e^-80` are treated as exactly zero. That is far
/// under the precision of either scalar and keeps subnormals out of the
/// kernels, which strongly decaying biases would otherwise produce.
const NEGLIGIBLE_LOGIT: f64 = -80.0;

/// Attention bias source for one forward pass.
pub(crate) enum Bias<'a, S> {
    None,
    Alibi(Vec<S>),
    Relative {
        params: &'a RelativeBiasParams<S>,
        max_len: usize,
        /// `[heads, L, L]` table gathered once per pass; absent on the
        /// incremental path.
        dense: Option<(usize, Vec<S>)>,
    },
}

impl<'a, S: Scalar> Bias<'a, S> {
    pub fn new(
        mode: BiasMode,
        num_heads: usize,
        max_len: usize,
        relative: Option<&'a RelativeBiasParams<S>>,
    ) -> Self {
        match (mode, relative) {
            (BiasMode::None, _) => Bias::None,
            (BiasMode::ALiBi, _) => Bias::Alibi(alibi_slopes(num_heads).into_iter().map(S::c).collect()),
            (BiasMode::LearnableRelative, Some(params)) => Bias::Relative {
                params,
                max_len,
                dense: None,
            },
            (BiasMode::LearnableRelative, None) => panic!("relative bias tables missing"),
        }
    }

    #[inline]
    pub fn value(&self, head: usize, q: &Token, k: &Token) -> S {
        match self {
            Bias::None => S::zero(),
            Bias::Alibi(slopes) => -slopes[head] * S::c(q.attn_pos.abs_diff(k.attn_pos) as f64),
            Bias::Relative { params, max_len, .. } => {
                params.position.row(head)[relative_distance_bucket(q.attn_pos, k.attn_pos, *max_len)]
                    + params.time.row(head)[time_bucket((q.ts - k.ts).abs())]
            }
        }
    }

    /// Gathers the full `[heads, L, L]` relative-bias table.
    pub fn materialize(&mut self, num_heads: usize, tokens: &[Token]) {
        if let Bias::Relative { .. } = self {
            let l = tokens.len();
            let mut table = vec![S::zero(); num_heads * l * l];
            for h in 0..num_heads {
                for (qi, q) in tokens.iter().enumerate() {
                    let row = &mut table[(h * l + qi) * l..(h * l + qi + 1) * l];
                    for (o, k) in row.iter_mut().zip(tokens) {
                        *o = self.value(h, q, k);
                    }
                }
            }
            if let Bias::Relative { dense, .. } = self {
                *dense = Some((l, table));
            }
        }
    }

    #[inline]
    fn lookup(&self, head: usize, qi: usize, q: &Token, kj: usize, k: &Token) -> S {
        match self {
            Bias::Relative {
                dense: Some((l, table)),
                ..
            } => table[(head * l + qi) * l + kj],
            _ => self.value(head, q, k),
        }
    }

    pub fn is_relative(&self) -> bool {
        matches!(self, Bias::Relative { .. })
    }
}

/// Keys and values visible to a query: rows `0..hist` come from the shared
/// history matrices, any index `>= hist` resolves to the query's own row.
pub(crate) struct KeySource<'a, S> {
    pub k: &'a [S],
    pub v: &'a [S],
    pub hist: usize,
    pub k_self: &'a [S],
    pub v_self: &'a [S],
    pub tokens: &'a [Token],
}

impl<S> KeySource<'_, S> {
    #[inline]
    fn k(&self, j: usize, d: usize) -> &[S] {
        if j < self.hist {
            &self.k[j * d..(j + 1) * d]
        } else {
            self.k_self
        }
    }

    #[inline]
    fn v(&self, j: usize, d: usize) -> &[S] {
        if j < self.hist {
            &self.v[j * d..(j + 1) * d]
        } else {
            self.v_self
        }
    }

    #[inline]
    fn token<'t>(&'t self, j: usize, own: &'t Token) -> &'t Token {
        if j < self.hist {
            &self.tokens[j]
        } else {
            own
        }
    }
}

pub(crate) struct Geometry {
    pub heads: usize,
    pub head_dim: usize,
}

impl Geometry {
    fn d(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// One query row across all heads. Writes the concatenated head outputs to
/// `out` and per-head log-sum-exp to `lse`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row<S: Scalar>(
    geo: &Geometry,
    q: &[S],
    qi: usize,
    own: &Token,
    keys: &[usize],
    src: &KeySource<'_, S>,
    bias: &Bias<'_, S>,
    scores: &mut Vec<S>,
    out: &mut [S],
    lse: &mut [S],
) {
    let d = geo.d();
    let dh = geo.head_dim;
    let scale = S::one() / S::c(dh as f64).sqrt();
    out.fill(S::zero());
    for h in 0..geo.heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        scores.clear();
        let mut max = S::neg_infinity();
        for &j in keys {
            let s = dot(qh, &src.k(j, d)[off..off + dh]) * scale
                + bias.lookup(h, qi, own, j, src.token(j, own));
            max = max.max(s);
            scores.push(s);
        }
        let cutoff = S::c(NEGLIGIBLE_LOGIT);
        let mut sum = S::zero();
        for s in scores.iter_mut() {
            let z = *s - max;
            *s = if z < cutoff { S::zero() } else { z.exp() };
            sum += *s;
        }
        let oh = &mut out[off..off + dh];
        for (&j, &e) in keys.iter().zip(scores.iter()) {
            if e != S::zero() {
                axpy(e / sum, &src.v(j, d)[off..off + dh], oh);
            }
        }
        lse[h] = max + sum.ln();
    }
}

/// Full-sequence forward: `q, k, v` are `[L, d]`, output `[L, d]` plus
/// `[L, heads]` log-sum-exp.
pub(crate) fn attention_forward<S: Scalar>(
    geo: &Geometry,
    tokens: &[Token],
    mask: &AttentionMask,
    bias: &Bias<'_, S>,
    q: &[S],
    k: &[S],
    v: &[S],
    out: &mut [S],
    lse: &mut [S],
) {
    let d = geo.d();
    let mut keys = Vec::with_capacity(tokens.len());
    let mut scores = Vec::with_capacity(tokens.len());
    for (qi, own) in tokens.iter().enumerate() {
        keys.clear();
        keys.extend(mask.keys(qi));
        let src = KeySource {
            k,
            v,
            hist: mask.history_tokens(),
            k_self: &k[qi * d..(qi + 1) * d],
            v_self: &v[qi * d..(qi + 1) * d],
            tokens,
        };
        attend_row(
            geo,
            &q[qi * d..(qi + 1) * d],
            qi,
            own,
            &keys,
            &src,
            bias,
            &mut scores,
            &mut out[qi * d..(qi + 1) * d],
            &mut lse[qi * geo.heads..(qi + 1) * geo.heads],
        );
    }
}

/// Gradients of the attention output with respect to `q, k, v` (accumulated)
/// and, for relative biases, into the dense `[heads, L, L]` `dbias` buffer.
/// Probabilities are recomputed from the stored log-sum-exp.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    geo: &Geometry,
    tokens: &[Token],
    mask: &AttentionMask,
    bias: &Bias<'_, S>,
    q: &[S],
    k: &[S],
    v: &[S],
    lse: &[S],
    dout: &[S],
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
    mut dbias: Option<&mut [S]>,
) {
    let d = geo.d();
    let l = tokens.len();
    let dh = geo.head_dim;
    let scale = S::one() / S::c(dh as f64).sqrt();
    let cutoff = S::c(NEGLIGIBLE_LOGIT);
    let mut keys = Vec::with_capacity(l);
    let mut probs = Vec::with_capacity(l);
    let mut dprobs = Vec::with_capacity(l);
    for (qi, own) in tokens.iter().enumerate() {
        keys.clear();
        keys.extend(mask.keys(qi));
        for h in 0..geo.heads {
            let off = h * dh;
            let qh = &q[qi * d + off..qi * d + off + dh];
            let doh = &dout[qi * d + off..qi * d + off + dh];
            let lse_h = lse[qi * geo.heads + h];
            probs.clear();
            dprobs.clear();
            let mut total = S::zero();
            for &j in &keys {
                let kj = &k[j * d + off..j * d + off + dh];
                let z = dot(qh, kj) * scale + bias.lookup(h, qi, own, j, &tokens[j]) - lse_h;
                if z < cutoff {
                    probs.push(S::zero());
                    dprobs.push(S::zero());
                    continue;
                }
                let p = z.exp();
                let dp = dot(doh, &v[j * d + off..j * d + off + dh]);
                total += p * dp;
                probs.push(p);
                dprobs.push(dp);
            }
            for ((&j, &p), &dp) in keys.iter().zip(&probs).zip(&dprobs) {
                if p == S::zero() {
                    continue;
                }
                let ds = p * (dp - total);
                let g = ds * scale;
                axpy(g, &k[j * d + off..j * d + off + dh], &mut dq[qi * d + off..qi * d + off + dh]);
                axpy(g, qh, &mut dk[j * d + off..j * d + off + dh]);
                axpy(p, doh, &mut dv[j * d + off..j * d + off + dh]);
                if let Some(db) = dbias.as_deref_mut() {
                    db[(h * l + qi) * l + j] += ds;
                }
            }
        }
    }
}

/// Scatters a dense `[heads, L, L]` bias gradient into the relative tables.
pub(crate) fn scatter_relative_grad<S: Scalar>(
    tokens: &[Token],
    mask: &AttentionMask,
    max_len: usize,
    dbias: &[S],
    grad: &mut RelativeBiasParams<S>,
) {
    let l = tokens.len();
    let heads = grad.position.rows();
    for h in 0..heads {
        for (qi, q) in tokens.iter().enumerate() {
            for kj in mask.keys(qi) {
                let g = dbias[(h * l + qi) * l + kj];
                let k = &tokens[kj];
                grad.position.row_mut(h)[relative_distance_bucket(q.attn_pos, k.attn_pos, max_len)] += g;
                grad.time.row_mut(h)[time_bucket((q.ts - k.ts).abs())] += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes_for_eight_heads() {
        let s = alibi_slopes(8);
        let expect: Vec<f64> = (1..=8).map(|i| 1.0 / f64::from(1u32 << i)).collect();
        assert_eq!(s, expect);
    }

    #[test]
    fn zero_distance_is_zero() {
        for h in 0..8 {
            assert_eq!(alibi_bias(h, 8, 5, 5), 0.0);
        }
    }

    #[test]
    fn bias_decreases_with_distance() {
        for heads in [1, 2, 4, 8, 12] {
            for h in 0..heads {
                for d in 0..50 {
                    assert!(alibi_bias(h, heads, 100, 100 - d) > alibi_bias(h, heads, 100, 100 - d - 1));
                }
            }
        }
    }

    #[test]
    fn relative_bucket_clamps() {
        assert_eq!(relative_distance_bucket(10, 10, 4), 4);
        assert_eq!(relative_distance_bucket(100, 0, 4), 8);
        assert_eq!(relative_distance_bucket(0, 100, 4), 0);
    }
}
