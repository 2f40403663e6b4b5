use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{group_by_user, ExposureLog};
use crate::error::Result;
use crate::seqbuild::{build_sequence, HistoryMask, OrganizationKind, TokenizedSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleGrouping {
    /// Users in id order, each user's requests chronologically.
    #[default]
    GroupedByUser,
    /// The same sequences in a globally shuffled request order.
    PointwiseShuffled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum LossScope {
    #[default]
    CandidatesOnly,
    /// Also supervise each history position with this probability.
    IncludeHistory(f64),
}

/// One request's candidates with everything before them as history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub user_id: u64,
    pub request_id: u64,
    pub seq: TokenizedSequence,
    /// Supervised positions, candidates first.
    pub positions: Vec<usize>,
    /// One label row per entry of `positions`.
    pub labels: Vec<Vec<u8>>,
}

impl TrainingSample {
    pub fn candidate_labels(&self) -> &[Vec<u8>] {
        &self.labels[..self.seq.candidate_count]
    }
}

struct UserLogs {
    user_id: u64,
    logs: Vec<ExposureLog>,
    /// Start offset of each request in `logs`, plus a final end offset.
    bounds: Vec<usize>,
}

/// Lazily materialized sample collection: sequences are built on access.
pub struct TrainingSet {
    users: Vec<UserLogs>,
    /// (user index, request index) in emission order.
    order: Vec<(usize, usize)>,
    organization: OrganizationKind,
    history_mask: HistoryMask,
    loss_scope: LossScope,
    max_len: usize,
    seed: u64,
}

/// Which requests of each user a set draws from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Split {
    All,
    /// All but the trailing `frac` of each user's requests.
    Train(f64),
    /// Only the trailing `frac`.
    Holdout(f64),
}

fn holdout_count(requests: usize, frac: f64) -> usize {
    ((requests as f64 * frac).ceil() as usize).min(requests)
}

impl TrainingSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        logs: &[ExposureLog],
        split: Split,
        grouping: SampleGrouping,
        organization: OrganizationKind,
        history_mask: HistoryMask,
        loss_scope: LossScope,
        max_len: usize,
        seed: u64,
    ) -> Self {
        let mut users = Vec::new();
        let mut order = Vec::new();
        for (user_id, mut user_logs) in group_by_user(logs) {
            user_logs.sort_by_key(|l| l.ts);
            let mut bounds = vec![0];
            for i in 1..user_logs.len() {
                if user_logs[i].request_id != user_logs[i - 1].request_id {
                    bounds.push(i);
                }
            }
            bounds.push(user_logs.len());
            let requests = bounds.len() - 1;
            let range = match split {
                Split::All => 0..requests,
                Split::Train(f) => 0..requests - holdout_count(requests, f),
                Split::Holdout(f) => requests - holdout_count(requests, f)..requests,
            };
            let ui = users.len();
            order.extend(range.map(|r| (ui, r)));
            users.push(UserLogs {
                user_id,
                logs: user_logs,
                bounds,
            });
        }
        if grouping == SampleGrouping::PointwiseShuffled {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Self {
            users,
            order,
            organization,
            history_mask,
            loss_scope,
            max_len,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Reshuffles emission order (used between epochs of shuffled runs).
    pub fn reshuffle(&mut self, seed: u64) {
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn get(&self, i: usize) -> Result<TrainingSample> {
        let (ui, r) = self.order[i];
        let user = &self.users[ui];
        let (start, end) = (user.bounds[r], user.bounds[r + 1]);
        let history = &user.logs[..start];
        let request = &user.logs[start..end];
        let candidates: Vec<u64> = request.iter().map(|l| l.item_id).collect();
        let seq = build_sequence(history, &candidates, request[0].ts, self.organization, self.max_len)?
            .with_history_mask(self.history_mask);
        let mut positions: Vec<usize> = seq.candidate_positions().collect();
        let mut labels: Vec<Vec<u8>> = request.iter().map(|l| l.labels.clone()).collect();
        if let LossScope::IncludeHistory(frac) = self.loss_scope {
            let kept = &history[history.len() - seq.history_len..];
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ request[0].request_id.rotate_left(17));
            for (log, p) in kept.iter().zip(seq.history_item_positions()) {
                if rng.random::<f64>() < frac {
                    positions.push(p);
                    labels.push(log.labels.clone());
                }
            }
        }
        Ok(TrainingSample {
            user_id: user.user_id,
            request_id: request[0].request_id,
            seq,
            positions,
            labels,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<TrainingSample>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// One sequence per request: the request's items are the candidates and all
/// of the user's earlier items the history.
pub fn build_training_samples(
    logs: &[ExposureLog],
    config: &super::TrainConfig,
) -> Result<Vec<TrainingSample>> {
    config
        .training_set(logs, Split::All)
        .iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    fn logs() -> Vec<ExposureLog> {
        let mut out = Vec::new();
        for user in 0..3u64 {
            for r in 0..3u64 {
                for k in 0..2u64 {
                    out.push(ExposureLog {
                        user_id: user,
                        request_id: user * 10 + r,
                        ts: 1000 + 100 * r as i64,
                        item_id: r * 2 + k,
                        labels: vec![u8::from(k == 0), 0],
                    });
                }
            }
        }
        out
    }

    #[test]
    fn windows_grow_by_request() {
        let cfg = TrainConfig::default();
        let samples = build_training_samples(&logs(), &cfg).unwrap();
        assert_eq!(samples.len(), 9);
        let lens: Vec<usize> = samples[..3].iter().map(|s| s.seq.history_len).collect();
        assert_eq!(lens, vec![0, 2, 4]);
        assert!(samples.iter().all(|s| s.positions == s.seq.candidate_positions().collect::<Vec<_>>()));
    }

    #[test]
    fn shuffled_is_a_permutation() {
        let grouped = build_training_samples(&logs(), &TrainConfig::default()).unwrap();
        let shuffled = build_training_samples(
            &logs(),
            &TrainConfig {
                sample_grouping: SampleGrouping::PointwiseShuffled,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let key = |s: &TrainingSample| s.request_id;
        let a: Vec<u64> = grouped.iter().map(key).collect();
        let b: Vec<u64> = shuffled.iter().map(key).collect();
        assert_ne!(a, b);
        let mut sorted = b.clone();
        sorted.sort();
        assert_eq!(a, sorted);
        for s in &shuffled {
            assert_eq!(Some(s), grouped.iter().find(|g| g.request_id == s.request_id));
        }
    }

    #[test]
    fn include_history_adds_labelled_positions() {
        let cfg = TrainConfig {
            loss_scope: LossScope::IncludeHistory(1.0),
            ..TrainConfig::default()
        };
        let samples = build_training_samples(&logs(), &cfg).unwrap();
        let last = &samples[2];
        assert_eq!(last.positions.len(), 2 + 4);
        assert_eq!(last.candidate_labels().len(), 2);
        assert_eq!(last.labels[2], vec![1, 0]);
    }
}
