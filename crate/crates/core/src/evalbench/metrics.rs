//! AUC and impression-weighted per-user GAUC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Rank-based, O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, ties sharing their average rank.
    // Twice the rank keeps the sum integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaucReport {
    pub gauc: f64,
    /// user → (AUC, exposure count) for users with both classes.
    pub per_user: BTreeMap<u64, (f64, usize)>,
    pub excluded_users: usize,
}

/// Exposure-weighted mean of per-user AUC over users having both classes.
pub fn gauc(scores: &[f64], labels: &[bool], users: &[u64]) -> Result<GaucReport> {
    if scores.len() != labels.len() || scores.len() != users.len() {
        return Err(Error::Argument("scores, labels and users differ in length".into()));
    }
    let mut groups: BTreeMap<u64, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((s, l), u) in scores.iter().zip(labels).zip(users) {
        let g = groups.entry(*u).or_default();
        g.0.push(*s);
        g.1.push(*l);
    }
    let mut per_user = BTreeMap::new();
    let mut excluded = 0;
    let (mut num, mut den) = (0.0, 0.0);
    for (user, (s, l)) in groups {
        match auc(&s, &l) {
            Ok(a) => {
                let w = s.len();
                num += a * w as f64;
                den += w as f64;
                per_user.insert(user, (a, w));
            }
            Err(Error::UndefinedMetric(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if per_user.is_empty() {
        return Err(Error::UndefinedMetric("every user has a single label class".into()));
    }
    Ok(GaucReport {
        gauc: num / den,
        per_user,
        excluded_users: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_is_half() {
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn weighted_users() {
        // user 1: 10 exposures with AUC 1.0, user 2: 30 exposures with AUC 0.5
        let mut s = Vec::new();
        let mut l = Vec::new();
        let mut u = Vec::new();
        for i in 0..10 {
            s.push(i as f64);
            l.push(i >= 5);
            u.push(1);
        }
        for i in 0..30 {
            s.push(0.0);
            l.push(i % 2 == 0);
            u.push(2);
        }
        // a single-class user is excluded
        s.push(1.0);
        l.push(true);
        u.push(3);
        let r = gauc(&s, &l, &u).unwrap();
        assert!((r.gauc - 0.625).abs() < 1e-15);
        assert_eq!(r.excluded_users, 1);
        assert_eq!(r.per_user[&2], (0.5, 30));
    }

    #[test]
    fn one_user_equals_auc() {
        let s = [0.1, 0.7, 0.3, 0.9];
        let l = [false, true, true, false];
        assert_eq!(gauc(&s, &l, &[4; 4]).unwrap().gauc, auc(&s, &l).unwrap());
    }

    #[test]
    fn no_user_has_both_classes() {
        assert!(matches!(
            gauc(&[0.1, 0.2], &[true, false], &[1, 2]),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
