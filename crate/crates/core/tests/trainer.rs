mod common;

use genrank::datagen::{generate_logs, GeneratedData, GeneratorConfig};
use genrank::nncore::{write_checkpoint, BiasMode, ModelConfig};
use genrank::seqbuild::{HistoryMask, OrganizationKind};
use genrank::trainer::{build_training_samples, evaluate_holdout, train, LossScope, SampleGrouping, TrainConfig};
use genrank::Error;

fn data() -> GeneratedData {
    generate_logs(&GeneratorConfig {
        num_users: 16,
        num_items: 40,
        requests_per_user: 8,
        items_per_request: 3,
        seed: 21,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn model() -> ModelConfig {
    ModelConfig {
        num_blocks: 1,
        num_heads: 2,
        hidden_dim: 8,
        num_items: 40,
        max_len: 32,
        ..ModelConfig::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_len: 32,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn no_history_reaches_into_its_own_or_later_requests() {
    let d = data();
    for org in OrganizationKind::ALL {
        let cfg = TrainConfig {
            organization: org,
            sample_grouping: SampleGrouping::PointwiseShuffled,
            ..train_cfg()
        };
        for s in build_training_samples(&d.logs, &cfg).unwrap() {
            let own = d.logs.iter().find(|l| l.request_id == s.request_id).unwrap().ts;
            for t in &s.seq.tokens[..s.seq.history_tokens()] {
                assert!(t.ts < own, "request {} sees ts {} >= {own}", s.request_id, t.ts);
            }
            let items: Vec<u64> =
                d.logs.iter().filter(|l| l.request_id == s.request_id).map(|l| l.item_id).collect();
            let cands: Vec<u64> = s.seq.tokens[s.seq.history_tokens()..].iter().map(|t| t.item.unwrap()).collect();
            assert_eq!(cands, items);
        }
    }
}

#[test]
fn deterministic_runs_write_identical_checkpoints() {
    let d = data();
    for bias_mode in [BiasMode::ALiBi, BiasMode::LearnableRelative] {
        let mc = ModelConfig { bias_mode, ..model() };
        let a = train::<f32>(&d.logs, &train_cfg(), &mc, None).unwrap();
        let b = train::<f32>(&d.logs, &train_cfg(), &mc, None).unwrap();
        assert_eq!(write_checkpoint(&a.model).unwrap(), write_checkpoint(&b.model).unwrap());
        assert_eq!(a.report.loss_trace, b.report.loss_trace);
        assert_eq!(a.report.steps(), a.report.step_seconds.len());
    }
}

#[test]
fn loss_falls_over_a_few_epochs() {
    let d = data();
    let cfg = TrainConfig { epochs: 4, ..train_cfg() };
    let r = train::<f64>(&d.logs, &cfg, &model(), None).unwrap().report;
    let per_epoch = r.steps() / 4;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&r.loss_trace[3 * per_epoch..]) < mean(&r.loss_trace[..per_epoch]));
}

#[test]
fn ablations_run_and_differ_from_default() {
    let d = data();
    // With one block, candidate outputs read only layer-0 keys, which the
    // history mask cannot touch.
    let model = || ModelConfig { num_blocks: 2, ..model() };
    let base = train::<f32>(&d.logs, &train_cfg(), &model(), None).unwrap();
    for cfg in [
        TrainConfig {
            loss_scope: LossScope::IncludeHistory(1.0),
            ..train_cfg()
        },
        TrainConfig {
            history_mask: HistoryMask::FullyVisible,
            ..train_cfg()
        },
        TrainConfig {
            sample_grouping: SampleGrouping::PointwiseShuffled,
            ..train_cfg()
        },
    ] {
        let run = train::<f32>(&d.logs, &cfg, &model(), None).unwrap();
        assert_eq!(run.model.config.history_mask, cfg.history_mask);
        assert_ne!(run.report.final_loss(), base.report.final_loss(), "{cfg:?}");
    }
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let d = data();
    let cfg = TrainConfig { lr: 1e30, ..train_cfg() };
    assert!(matches!(train::<f32>(&d.logs, &cfg, &model(), None), Err(Error::Diverged { .. })));
}

#[test]
fn holdout_report_covers_every_task() {
    let d = data();
    let t = train::<f32>(&d.logs, &train_cfg(), &model(), None).unwrap();
    let r = evaluate_holdout(&t.model, &d.logs, &train_cfg(), d.tasks.names()).unwrap();
    assert_eq!(r.tasks.len(), 2);
    // Trailing 20% of 8 requests is 2 requests of 3 items per user.
    assert_eq!(r.examples, 16 * 2 * 3);
    assert!(r.tasks.iter().all(|t| t.auc.is_some_and(|a| (0.0..=1.0).contains(&a))));
}

#[test]
fn train_max_len_cannot_exceed_model() {
    let d = data();
    let cfg = TrainConfig { max_len: 64, ..train_cfg() };
    assert!(matches!(train::<f32>(&d.logs, &cfg, &model(), None), Err(Error::Config(_))));
}
