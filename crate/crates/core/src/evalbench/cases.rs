use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::ExposureLog;
use crate::error::Result;
use crate::seqbuild::{build_sequence, OrganizationKind, TokenizedSequence};

/// Chronological history of `n` items in requests of one to four items.
pub(crate) fn random_history(rng: &mut ChaCha8Rng, n: usize, num_items: usize, tasks: usize) -> Vec<ExposureLog> {
    let mut ts = 1_000_000i64;
    let mut out = Vec::with_capacity(n);
    let mut left = 0;
    let mut request = 0;
    for _ in 0..n {
        if left == 0 {
            ts += rng.random_range(1..5_000);
            left = rng.random_range(1..=4);
            request += 1;
        }
        left -= 1;
        out.push(ExposureLog {
            user_id: 0,
            request_id: request,
            ts,
            item_id: rng.random_range(0..num_items as u64),
            labels: (0..tasks).map(|_| u8::from(rng.random_bool(0.4))).collect(),
        });
    }
    out
}

pub(crate) struct Case {
    pub history: Vec<ExposureLog>,
    pub candidates: Vec<u64>,
    pub now: i64,
    pub seq: TokenizedSequence,
}

pub(crate) fn random_case(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    num_items: usize,
    tasks: usize,
    org: OrganizationKind,
    max_len: usize,
) -> Result<Case> {
    let history = random_history(rng, n, num_items, tasks);
    let candidates: Vec<u64> = (0..c).map(|_| rng.random_range(0..num_items as u64)).collect();
    let now = history.last().map_or(1_000_000, |l| l.ts) + rng.random_range(0..10_000);
    let seq = build_sequence(&history, &candidates, now, org, max_len)?;
    Ok(Case {
        history,
        candidates,
        now,
        seq,
    })
}
