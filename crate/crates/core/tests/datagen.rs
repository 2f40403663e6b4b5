mod common;

use common::*;
use genrank::datagen::{
    bayes_optimal_auc, generate_logs, read_catalog, read_logs, read_task_names, read_truth, write_dataset,
    GeneratorConfig,
};

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        num_users: 40,
        num_items: 120,
        requests_per_user: 12,
        items_per_request: 4,
        side_dim: 5,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&generate_logs(&small(7)).unwrap(), a.path()).unwrap();
    write_dataset(&generate_logs(&small(7)).unwrap(), b.path()).unwrap();
    for f in ["logs.jsonl", "truth.jsonl", "catalog.bin", "side.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn files_read_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_logs(&small(2)).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let tasks = read_task_names(&dir.path().join("logs.jsonl")).unwrap();
    assert_eq!(tasks, data.tasks);
    assert_eq!(read_logs(&dir.path().join("logs.jsonl"), &tasks).unwrap(), data.logs);
    assert_eq!(read_truth(&dir.path().join("truth.jsonl"), &tasks).unwrap(), data.truth);
    assert_eq!(read_catalog(&dir.path().join("catalog.bin")).unwrap(), data.catalog.latents);
    assert_eq!(Some(read_catalog(&dir.path().join("side.bin")).unwrap()), data.catalog.side);
}

#[test]
fn bayes_auc_equals_pairwise_oracle_on_truth() {
    let data = generate_logs(&small(3)).unwrap();
    for k in 0..data.tasks.len() {
        let scores: Vec<f64> = data.truth.iter().map(|t| t.probs[k]).collect();
        let labels: Vec<bool> = data.logs.iter().map(|l| l.label(k)).collect();
        let want = pairwise_auc(&scores, &labels).unwrap();
        assert!((bayes_optimal_auc(&data.logs, &data.truth, k).unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn labels_follow_truth_probabilities() {
    let data = generate_logs(&small(4)).unwrap();
    for k in 0..data.tasks.len() {
        let n = data.logs.len() as f64;
        let observed: f64 = data.logs.iter().map(|l| l.labels[k] as f64).sum::<f64>() / n;
        let expected: f64 = data.truth.iter().map(|t| t.probs[k]).sum::<f64>() / n;
        let var: f64 = data.truth.iter().map(|t| t.probs[k] * (1.0 - t.probs[k])).sum::<f64>() / (n * n);
        assert!((observed - expected).abs() < 5.0 * var.sqrt(), "task {k}: {observed} vs {expected}");
    }
}

#[test]
fn streams_are_chronological_with_one_time_per_request() {
    let data = generate_logs(&small(5)).unwrap();
    for w in data.logs.windows(2) {
        if w[0].user_id == w[1].user_id {
            if w[0].request_id == w[1].request_id {
                assert_eq!(w[0].ts, w[1].ts);
            } else {
                assert!(w[1].ts > w[0].ts);
                assert_eq!(w[1].request_id, w[0].request_id + 1);
            }
        }
    }
}

#[test]
fn preference_signal_is_learnable_in_later_requests() {
    // Drift keeps the population preference, so held-out requests are as
    // predictable as the rest.
    let data = generate_logs(&GeneratorConfig {
        num_users: 150,
        ..small(6)
    })
    .unwrap();
    let late: Vec<usize> = (0..data.logs.len()).filter(|&i| data.logs[i].request_id % 12 >= 9).collect();
    let scores: Vec<f64> = late.iter().map(|&i| data.truth[i].probs[0]).collect();
    let labels: Vec<bool> = late.iter().map(|&i| data.logs[i].label(0)).collect();
    let all = bayes_optimal_auc(&data.logs, &data.truth, 0).unwrap();
    assert!((pairwise_auc(&scores, &labels).unwrap() - all).abs() < 0.05);
}
