use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, gauc};
use crate::error::{Error, Result};

/// Version stamped into every JSON report.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    /// `None` when the task has a single label class.
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub per_user: BTreeMap<u64, (f64, usize)>,
    pub excluded_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub examples: usize,
    pub tasks: Vec<TaskMetrics>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricReport {
    /// `scores[i][k]` and `labels[i][k]` are example `i`, task `k`.
    pub fn compute(
        task_names: &[String],
        scores: &[Vec<f64>],
        labels: &[Vec<u8>],
        users: &[u64],
    ) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != users.len() {
            return Err(Error::Argument("scores, labels and users differ in length".into()));
        }
        let mut tasks = Vec::with_capacity(task_names.len());
        for (k, name) in task_names.iter().enumerate() {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[k] == 1).collect();
            let g = match gauc(&s, &l, users) {
                Ok(g) => Some(g),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            tasks.push(TaskMetrics {
                task: name.clone(),
                auc: defined(auc(&s, &l))?,
                gauc: g.as_ref().map(|g| g.gauc),
                excluded_users: g.as_ref().map_or(0, |g| g.excluded_users),
                per_user: g.map(|g| g.per_user).unwrap_or_default(),
            });
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            examples: scores.len(),
            tasks,
        })
    }

    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_task_is_null() {
        let names = vec!["a".to_string(), "b".to_string()];
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![1, 0], vec![0, 0]];
        let r = MetricReport::compute(&names, &scores, &labels, &[7, 7]).unwrap();
        assert_eq!(r.task("a").unwrap().auc, Some(1.0));
        assert_eq!(r.task("a").unwrap().gauc, Some(1.0));
        assert_eq!(r.task("b").unwrap().auc, None);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert!(json["tasks"][1]["auc"].is_null());
    }
}
