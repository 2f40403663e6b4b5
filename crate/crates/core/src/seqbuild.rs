//! Turns a user's chronological logs plus a candidate set into a token
//! sequence under one of two organizations.
//!
//! * Action-oriented: one token per history item carrying item + action
//!   embeddings, one token per candidate carrying item + MASK. `L = N + C`.
//! * Item-oriented interleaved: per history item an item token followed by an
//!   action token; per candidate one item token. `L = 2N + C`.
//!
//! Candidates share one position, request index and time bucket, and the
//! candidate mask lets each candidate see the whole history and itself only.

use serde::{Deserialize, Serialize};

use crate::datagen::{CatalogMatrix, ExposureLog};
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Number of pre-request time buckets, sentinel included.
pub const TIME_BUCKETS: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrganizationKind {
    #[default]
    ActionOriented,
    ItemOrientedInterleaved,
}

impl OrganizationKind {
    pub const ALL: [OrganizationKind; 2] = [Self::ActionOriented, Self::ItemOrientedInterleaved];

    /// Sequence length for `n` history items and `c` candidates.
    pub fn seq_len(self, n: usize, c: usize) -> usize {
        match self {
            Self::ActionOriented => n + c,
            Self::ItemOrientedInterleaved => 2 * n + c,
        }
    }
}

/// Visibility among history positions. Candidate rows are unaffected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistoryMask {
    #[default]
    Causal,
    FullyVisible,
}

/// Action codes: row 0 is the base "observed" embedding, rows `1..=K` the
/// per-task positive embeddings and row `K + 1` the MASK embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionVocabulary {
    pub num_tasks: usize,
}

impl ActionVocabulary {
    pub const OBSERVED: usize = 0;

    pub fn new(num_tasks: usize) -> Self {
        assert!(num_tasks <= 63, "at most 63 tasks");
        Self { num_tasks }
    }

    pub fn positive(&self, task: usize) -> usize {
        debug_assert!(task < self.num_tasks);
        1 + task
    }

    pub fn mask(&self) -> usize {
        1 + self.num_tasks
    }

    pub fn size(&self) -> usize {
        2 + self.num_tasks
    }

    /// Action-table rows summed for `action`.
    pub fn codes(&self, action: Action) -> Vec<usize> {
        match action {
            Action::None => Vec::new(),
            Action::Mask => vec![self.mask()],
            Action::Observed(bits) => std::iter::once(Self::OBSERVED)
                .chain((0..self.num_tasks).filter(|k| bits & (1 << k) != 0).map(|k| self.positive(k)))
                .collect(),
        }
    }
}

/// Action content of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Interleaved item tokens carry no action embedding.
    None,
    /// Observed history action; bit `k` set when task `k` was positive.
    Observed(u64),
    Mask,
}

impl Action {
    pub fn from_labels(labels: &[u8]) -> Self {
        Action::Observed(
            labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l != 0)
                .fold(0u64, |acc, (k, _)| acc | (1 << k)),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub item: Option<u64>,
    pub action: Action,
    pub position: usize,
    pub request: usize,
    pub time_bucket: usize,
    /// Distance coordinate for attention biases. History tokens use their
    /// ordinal; every candidate uses the history token count.
    pub attn_pos: usize,
    pub ts: i64,
    pub is_candidate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    history_tokens: usize,
    history: HistoryMask,
}

impl AttentionMask {
    pub fn new(len: usize, history_tokens: usize, history: HistoryMask) -> Self {
        assert!(history_tokens <= len);
        Self {
            len,
            history_tokens,
            history,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn history_tokens(&self) -> usize {
        self.history_tokens
    }

    pub fn history_mode(&self) -> HistoryMask {
        self.history
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        if q < self.history_tokens {
            match self.history {
                HistoryMask::Causal => k <= q,
                HistoryMask::FullyVisible => k < self.history_tokens,
            }
        } else {
            k < self.history_tokens || k == q
        }
    }

    /// Allowed keys of row `q` in ascending order.
    pub fn keys(&self, q: usize) -> KeyIter {
        let (end, extra) = if q < self.history_tokens {
            match self.history {
                HistoryMask::Causal => (q + 1, None),
                HistoryMask::FullyVisible => (self.history_tokens, None),
            }
        } else {
            (self.history_tokens, Some(q))
        };
        KeyIter { next: 0, end, extra }
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.len)
            .map(|q| (0..self.len).map(|k| self.allowed(q, k)).collect())
            .collect()
    }
}

pub struct KeyIter {
    next: usize,
    end: usize,
    extra: Option<usize>,
}

impl Iterator for KeyIter {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.next < self.end {
            self.next += 1;
            Some(self.next - 1)
        } else {
            self.extra.take()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSequence {
    pub tokens: Vec<Token>,
    pub mask: AttentionMask,
    pub loss_positions: Vec<usize>,
    pub organization: OrganizationKind,
    /// History items kept after truncation (N).
    pub history_len: usize,
    pub candidate_count: usize,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn history_tokens(&self) -> usize {
        self.mask.history_tokens()
    }

    pub fn candidate_positions(&self) -> std::ops::Range<usize> {
        self.history_tokens()..self.len()
    }

    /// Positions whose output predicts the action on history item `i`: the
    /// token itself (action-oriented) or the item token (interleaved).
    pub fn history_item_positions(&self) -> Vec<usize> {
        match self.organization {
            OrganizationKind::ActionOriented => (0..self.history_len).collect(),
            OrganizationKind::ItemOrientedInterleaved => (0..self.history_len).map(|i| 2 * i).collect(),
        }
    }

    pub fn position_index(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position).collect()
    }

    pub fn request_index(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.request).collect()
    }

    pub fn pre_request_bucket(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.time_bucket).collect()
    }

    pub fn with_history_mask(mut self, history: HistoryMask) -> Self {
        self.mask = AttentionMask::new(self.mask.len, self.mask.history_tokens, history);
        self
    }
}

/// Position of history item `i`, or of any candidate when `is_candidate`.
pub fn position_index(i: usize, is_candidate: bool, history_len: usize) -> usize {
    if is_candidate {
        history_len
    } else {
        i
    }
}

/// Count of distinct timestamps in a chronologically sorted prefix.
pub fn request_index(prefix: &[i64]) -> usize {
    prefix.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!prefix.is_empty())
}

/// `min(floor(log2(1 + delta)) + 1, 31)`; bucket 0 is reserved for "no prior
/// request".
pub fn time_bucket(delta_seconds: i64) -> usize {
    let d = delta_seconds.max(0) as u64;
    let bits = 64 - (d.saturating_add(1)).leading_zeros() as usize;
    bits.min(TIME_BUCKETS - 1)
}

/// Bucket of `t - max{t_j : t_j < t}` over `prior`; 0 when no earlier
/// timestamp exists.
pub fn pre_request_bucket(t: i64, prior: &[i64]) -> usize {
    match prior.iter().copied().filter(|&p| p < t).max() {
        Some(prev) => time_bucket(t - prev),
        None => 0,
    }
}

pub fn build_sequence(
    history: &[ExposureLog],
    candidates: &[u64],
    now: i64,
    org: OrganizationKind,
    max_len: usize,
) -> Result<TokenizedSequence> {
    if candidates.is_empty() {
        return Err(Error::Argument("candidate set is empty".into()));
    }
    if candidates.len() > max_len {
        return Err(Error::Argument(format!(
            "{} candidates exceed max_len {max_len}",
            candidates.len()
        )));
    }
    if let Some(w) = history.windows(2).find(|w| w[1].ts < w[0].ts) {
        return Err(Error::Validation(format!(
            "history not chronological: {} after {}",
            w[1].ts, w[0].ts
        )));
    }
    if let Some(last) = history.last() {
        if now < last.ts {
            return Err(Error::Validation(format!("now {now} precedes last history timestamp {}", last.ts)));
        }
    }

    let c = candidates.len();
    let keep = history.len().min(max_len - c);
    let dropped = history.len() - keep;
    let all_ts: Vec<i64> = history.iter().map(|l| l.ts).collect();
    let kept = &history[dropped..];

    // Per-item indices. Requests count over the kept window; the time gap looks
    // back across truncation so the first kept item keeps its true gap.
    let mut item_meta = Vec::with_capacity(keep);
    let mut distinct = 0usize;
    let mut prev_ts: Option<i64> = None;
    let mut last_gap_bucket = 0usize;
    for (i, log) in kept.iter().enumerate() {
        if prev_ts != Some(log.ts) {
            distinct += 1;
            last_gap_bucket = pre_request_bucket(log.ts, &all_ts[..dropped + i]);
            prev_ts = Some(log.ts);
        }
        item_meta.push((position_index(i, false, keep), distinct, last_gap_bucket));
    }
    let cand_position = position_index(0, true, keep);
    let cand_request = distinct + 1;
    let cand_bucket = match history.last() {
        Some(last) => time_bucket(now - last.ts),
        None => 0,
    };

    let history_tokens = match org {
        OrganizationKind::ActionOriented => keep,
        OrganizationKind::ItemOrientedInterleaved => 2 * keep,
    };
    let len = org.seq_len(keep, c);
    let mut tokens = Vec::with_capacity(len);
    for (log, &(position, request, time_bucket)) in kept.iter().zip(&item_meta) {
        let base = Token {
            item: Some(log.item_id),
            action: Action::from_labels(&log.labels),
            position,
            request,
            time_bucket,
            attn_pos: tokens.len(),
            ts: log.ts,
            is_candidate: false,
        };
        match org {
            OrganizationKind::ActionOriented => tokens.push(base),
            OrganizationKind::ItemOrientedInterleaved => {
                tokens.push(Token {
                    action: Action::None,
                    ..base
                });
                tokens.push(Token {
                    item: None,
                    attn_pos: base.attn_pos + 1,
                    ..base
                });
            }
        }
    }
    for &item in candidates {
        tokens.push(Token {
            item: Some(item),
            action: match org {
                OrganizationKind::ActionOriented => Action::Mask,
                OrganizationKind::ItemOrientedInterleaved => Action::None,
            },
            position: cand_position,
            request: cand_request,
            time_bucket: cand_bucket,
            attn_pos: history_tokens,
            ts: now,
            is_candidate: true,
        });
    }
    debug_assert_eq!(tokens.len(), len);

    Ok(TokenizedSequence {
        tokens,
        mask: AttentionMask::new(len, history_tokens, HistoryMask::Causal),
        loss_positions: (history_tokens..len).collect(),
        organization: org,
        history_len: keep,
        candidate_count: c,
    })
}

/// Borrowed view of the five input tables plus the optional frozen side
/// embedding and its learned projection.
pub struct EmbeddingTables<'a, S> {
    pub item: &'a Tensor<S>,
    pub action: &'a Tensor<S>,
    pub position: &'a Tensor<S>,
    pub request: &'a Tensor<S>,
    pub time: &'a Tensor<S>,
    pub side: Option<(&'a CatalogMatrix, &'a Tensor<S>)>,
    pub vocab: ActionVocabulary,
}

impl<S: Scalar> EmbeddingTables<'_, S> {
    /// Item-table row for `item`; unknown ids map to the trailing OOV row.
    pub fn item_row(&self, item: u64) -> usize {
        let oov = self.item.rows() - 1;
        usize::try_from(item).ok().filter(|&i| i < oov).unwrap_or(oov)
    }

    fn clamp_row(table: &Tensor<S>, i: usize) -> usize {
        i.min(table.rows() - 1)
    }

    pub fn position_row(&self, p: usize) -> usize {
        Self::clamp_row(self.position, p)
    }

    pub fn request_row(&self, r: usize) -> usize {
        Self::clamp_row(self.request, r)
    }
}

/// Input vector of one token: item + side projection + action + position +
/// request index + pre-request time embeddings.
pub fn compose_input<S: Scalar>(token: &Token, tables: &EmbeddingTables<'_, S>) -> Vec<S> {
    let dim = tables.item.cols();
    let mut out = vec![S::zero(); dim];
    let add = |out: &mut [S], row: &[S]| {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    };
    if let Some(item) = token.item {
        let row = tables.item_row(item);
        add(&mut out, tables.item.row(row));
        if let Some((side, proj)) = tables.side {
            if row < side.rows {
                for (s, p) in side.row(row).iter().zip(0..proj.rows()) {
                    let s = S::c(f64::from(*s));
                    for (o, w) in out.iter_mut().zip(proj.row(p)) {
                        *o += s * *w;
                    }
                }
            }
        }
    }
    for code in tables.vocab.codes(token.action) {
        add(&mut out, tables.action.row(code));
    }
    add(&mut out, tables.position.row(tables.position_row(token.position)));
    add(&mut out, tables.request.row(tables.request_row(token.request)));
    add(&mut out, tables.time.row(token.time_bucket.min(TIME_BUCKETS - 1)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(item: u64, ts: i64, labels: Vec<u8>) -> ExposureLog {
        ExposureLog {
            user_id: 0,
            request_id: ts as u64,
            ts,
            item_id: item,
            labels,
        }
    }

    fn rows(mask: &AttentionMask) -> Vec<Vec<usize>> {
        (0..mask.len()).map(|q| mask.keys(q).collect()).collect()
    }

    #[test]
    fn one_history_two_candidates() {
        let s = build_sequence(&[log(1, 10, vec![1, 0])], &[5, 6], 20, OrganizationKind::ActionOriented, 480)
            .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(rows(&s.mask), vec![vec![0], vec![0, 1], vec![0, 2]]);
        assert_eq!(s.loss_positions, vec![1, 2]);
    }

    #[test]
    fn cold_start() {
        let s = build_sequence(&[], &[5], 20, OrganizationKind::ActionOriented, 480).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.mask.to_dense(), vec![vec![true]]);
        assert_eq!(s.loss_positions, vec![0]);
        assert_eq!(s.tokens[0].position, 0);
        assert_eq!(s.tokens[0].time_bucket, 0);
    }

    #[test]
    fn lengths_per_organization() {
        let hist: Vec<_> = (0..100).map(|i| log(i, 10 * i as i64, vec![0, 0])).collect();
        let cands: Vec<u64> = (0..20).collect();
        let a = build_sequence(&hist, &cands, 5000, OrganizationKind::ActionOriented, 480).unwrap();
        let b = build_sequence(&hist, &cands, 5000, OrganizationKind::ItemOrientedInterleaved, 480).unwrap();
        assert_eq!(a.len(), 120);
        assert_eq!(b.len(), 220);
        assert_eq!(b.loss_positions, (200..220).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_keeps_suffix() {
        let hist: Vec<_> = (0..10).map(|i| log(i, i as i64, vec![0])).collect();
        let s = build_sequence(&hist, &[99, 98], 100, OrganizationKind::ActionOriented, 6).unwrap();
        assert_eq!(s.history_len, 4);
        let items: Vec<_> = s.tokens.iter().map(|t| t.item.unwrap()).collect();
        assert_eq!(items, vec![6, 7, 8, 9, 99, 98]);
        // Gap of the first kept item still refers to the dropped predecessor.
        assert_eq!(s.tokens[0].time_bucket, time_bucket(1));
    }

    #[test]
    fn errors() {
        let k = OrganizationKind::ActionOriented;
        assert!(matches!(build_sequence(&[], &[], 0, k, 10), Err(Error::Argument(_))));
        let unsorted = vec![log(1, 20, vec![0]), log(2, 10, vec![0])];
        assert!(matches!(build_sequence(&unsorted, &[1], 30, k, 10), Err(Error::Validation(_))));
        assert!(build_sequence(&[log(1, 20, vec![0])], &[1], 19, k, 10).is_err());
    }

    #[test]
    fn position_rules() {
        assert_eq!((0..3).map(|i| position_index(i, false, 3)).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(position_index(0, true, 3), 3);
        assert_eq!(position_index(0, true, 0), 0);
    }

    #[test]
    fn request_index_counts_distinct() {
        assert_eq!(request_index(&[10, 10, 20]), 2);
        assert_eq!(request_index(&[5]), 1);
        assert_eq!(request_index(&[1, 2, 3]), 3);
        assert_eq!(request_index(&[]), 0);
    }

    #[test]
    fn pre_request_gap() {
        assert_eq!(pre_request_bucket(25, &[10, 10]), time_bucket(15));
        assert_eq!(time_bucket(15), 5);
        assert_eq!(pre_request_bucket(10, &[]), 0);
        // Same-request items share the strict predecessor.
        assert_eq!(pre_request_bucket(25, &[10, 25]), pre_request_bucket(25, &[10]));
        assert_eq!(time_bucket(0), 1);
        assert_eq!(time_bucket(i64::MAX), 31);
    }

    #[test]
    fn sequence_indices_match_rules() {
        let hist = vec![log(1, 10, vec![0]), log(2, 10, vec![1]), log(3, 25, vec![0])];
        let s = build_sequence(&hist, &[7, 8], 40, OrganizationKind::ActionOriented, 480).unwrap();
        assert_eq!(s.position_index(), vec![0, 1, 2, 3, 3]);
        assert_eq!(s.request_index(), vec![1, 1, 2, 3, 3]);
        let b = s.pre_request_bucket();
        assert_eq!(b[..3], [0, 0, time_bucket(15)]);
        assert_eq!(b[3], time_bucket(15));
        assert_eq!(b[3], b[4]);
        assert!(s.tokens[3..].iter().all(|t| t.action == Action::Mask));
    }

    #[test]
    fn interleaved_pairs_share_indices() {
        let hist = vec![log(1, 10, vec![1]), log(2, 30, vec![0])];
        let s = build_sequence(&hist, &[7], 40, OrganizationKind::ItemOrientedInterleaved, 480).unwrap();
        assert_eq!(s.len(), 5);
        for i in 0..2 {
            let (a, b) = (s.tokens[2 * i], s.tokens[2 * i + 1]);
            assert_eq!((a.position, a.request, a.time_bucket), (b.position, b.request, b.time_bucket));
            assert_eq!(a.action, Action::None);
            assert!(matches!(b.action, Action::Observed(_)));
            assert_eq!(b.item, None);
        }
        assert_eq!(s.tokens[4].action, Action::None);
        assert_eq!(s.tokens[4].attn_pos, 4);
        assert_eq!(s.history_item_positions(), vec![0, 2]);
    }

    #[test]
    fn fully_visible_history() {
        let hist = vec![log(1, 10, vec![1]), log(2, 30, vec![0])];
        let s = build_sequence(&hist, &[7, 8], 40, OrganizationKind::ActionOriented, 480)
            .unwrap()
            .with_history_mask(HistoryMask::FullyVisible);
        assert_eq!(rows(&s.mask), vec![vec![0, 1], vec![0, 1], vec![0, 1, 2], vec![0, 1, 3]]);
    }

    #[test]
    fn action_codes() {
        let v = ActionVocabulary::new(2);
        assert_eq!(v.codes(Action::from_labels(&[1, 0])), vec![0, 1]);
        assert_eq!(v.codes(Action::from_labels(&[1, 1])), vec![0, 1, 2]);
        assert_eq!(v.codes(Action::Mask), vec![3]);
        assert!(v.codes(Action::None).is_empty());
    }
}
