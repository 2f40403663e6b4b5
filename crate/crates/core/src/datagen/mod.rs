//! Synthetic exposure logs drawn from a latent-factor user model with known
//! label probabilities, plus the on-disk log, truth and catalog formats.

mod generator;
mod io;

pub use generator::{generate_logs, GeneratedData, GeneratorConfig};
pub use io::{
    read_catalog, read_logs, read_task_names, read_truth, write_catalog, write_dataset, write_logs, write_truth,
    CATALOG_MAGIC, CATALOG_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::metrics;

/// Ordered list of binary task names. Label vectors are indexed by position
/// in this list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskSet(Vec<String>);

impl TaskSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config("empty task name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate task `{n}`")));
            }
        }
        Ok(Self(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }
}

impl Default for TaskSet {
    fn default() -> Self {
        Self(vec!["click".into(), "engage".into()])
    }
}

/// One item shown to one user within one request, with its action labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExposureLog {
    pub user_id: u64,
    pub request_id: u64,
    /// Seconds since epoch.
    pub ts: i64,
    pub item_id: u64,
    /// One 0/1 label per task, in [`TaskSet`] order.
    pub labels: Vec<u8>,
}

impl ExposureLog {
    pub fn label(&self, task: usize) -> bool {
        self.labels[task] != 0
    }
}

/// Generator-side label probabilities for one exposure. Never an input to
/// training.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub user_id: u64,
    pub request_id: u64,
    pub item_id: u64,
    pub probs: Vec<f64>,
}

/// Dense row-major float32 matrix as stored in `catalog.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl CatalogMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Item latent factors plus optional frozen side embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCatalog {
    pub latents: CatalogMatrix,
    pub side: Option<CatalogMatrix>,
}

impl ItemCatalog {
    pub fn num_items(&self) -> usize {
        self.latents.rows
    }
}

/// AUC the generator's own probabilities achieve against the sampled labels
/// for `task`. Upper reference for any learned model on the same data.
pub fn bayes_optimal_auc(logs: &[ExposureLog], truth: &[GroundTruth], task: usize) -> Result<f64> {
    if logs.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} logs but {} ground-truth rows",
            logs.len(),
            truth.len()
        )));
    }
    let mut scores = Vec::with_capacity(logs.len());
    let mut labels = Vec::with_capacity(logs.len());
    for (log, t) in logs.iter().zip(truth) {
        if (log.user_id, log.request_id, log.item_id) != (t.user_id, t.request_id, t.item_id) {
            return Err(Error::Validation(format!(
                "truth row for user {} request {} is misaligned",
                log.user_id, log.request_id
            )));
        }
        let p = *t
            .probs
            .get(task)
            .ok_or_else(|| Error::Argument(format!("task index {task} out of range")))?;
        scores.push(p);
        labels.push(log.label(task));
    }
    metrics::auc(&scores, &labels)
}

/// Checks the cross-record invariants: shared timestamp per request and
/// non-decreasing timestamps per user. Records of different users may
/// interleave.
pub fn validate_logs(logs: &[ExposureLog], tasks: &TaskSet) -> Result<()> {
    use std::collections::HashMap;

    let mut request_ts: HashMap<(u64, u64), i64> = HashMap::new();
    let mut user_last: HashMap<u64, i64> = HashMap::new();
    for (i, log) in logs.iter().enumerate() {
        if log.labels.len() != tasks.len() {
            return Err(Error::Validation(format!(
                "record {i}: {} labels for {} tasks",
                log.labels.len(),
                tasks.len()
            )));
        }
        if let Some((k, v)) = log.labels.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(Error::Validation(format!(
                "record {i}: label `{}` = {v} is not binary",
                tasks.names()[k]
            )));
        }
        match request_ts.get(&(log.user_id, log.request_id)) {
            Some(&ts) if ts != log.ts => {
                return Err(Error::Validation(format!(
                    "record {i}: request {} of user {} has timestamps {ts} and {}",
                    log.request_id, log.user_id, log.ts
                )));
            }
            Some(_) => {}
            None => {
                request_ts.insert((log.user_id, log.request_id), log.ts);
            }
        }
        if let Some(&last) = user_last.get(&log.user_id) {
            if log.ts < last {
                return Err(Error::Validation(format!(
                    "record {i}: timestamp regression for user {} ({} after {last})",
                    log.user_id, log.ts
                )));
            }
        }
        user_last.insert(log.user_id, log.ts);
    }
    Ok(())
}

/// Per-user chronological log streams, users in ascending id order.
pub fn group_by_user(logs: &[ExposureLog]) -> Vec<(u64, Vec<ExposureLog>)> {
    use std::collections::BTreeMap;

    let mut users: BTreeMap<u64, Vec<ExposureLog>> = BTreeMap::new();
    for log in logs {
        users.entry(log.user_id).or_default().push(log.clone());
    }
    users.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(user: u64, req: u64, ts: i64, labels: Vec<u8>) -> ExposureLog {
        ExposureLog {
            user_id: user,
            request_id: req,
            ts,
            item_id: 1,
            labels,
        }
    }

    #[test]
    fn task_set_rejects_duplicates() {
        assert!(TaskSet::new(["click", "click"]).is_err());
        assert!(TaskSet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn request_timestamp_conflict() {
        let tasks = TaskSet::new(["click"]).unwrap();
        let logs = vec![log(1, 7, 10, vec![0]), log(1, 7, 11, vec![1])];
        let err = validate_logs(&logs, &tasks).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn timestamp_regression() {
        let tasks = TaskSet::new(["click"]).unwrap();
        let logs = vec![log(1, 1, 20, vec![0]), log(2, 2, 5, vec![0]), log(1, 3, 19, vec![0])];
        assert!(validate_logs(&logs, &tasks).is_err());
        let ok = vec![log(1, 1, 20, vec![0]), log(2, 2, 5, vec![0]), log(1, 3, 20, vec![1])];
        validate_logs(&ok, &tasks).unwrap();
    }

    #[test]
    fn non_binary_label() {
        let tasks = TaskSet::new(["click"]).unwrap();
        assert!(validate_logs(&[log(1, 1, 1, vec![2])], &tasks).is_err());
    }
}
