use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use genrank::datagen::{bayes_optimal_auc, generate_logs, read_catalog, read_logs, read_task_names, write_dataset, GeneratorConfig};
use genrank::evalbench::{bench_compare, compare, probe, MIN_REPETITIONS};
use genrank::nncore::{load_checkpoint, AnyModel, ModelConfig, Precision};
use genrank::trainer::{evaluate, train, Split, TrainConfig, TrainedModel};
use genrank::Scalar;

#[derive(Parser)]
#[command(name = "genrank", version, about = "Generative ranking: data, training, evaluation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic exposure logs, truth sidecar and item catalog.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint, manifest and report.
    Train {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Side embeddings; defaults to side.bin next to the logs when the
        /// model expects them.
        #[arg(long)]
        side: Option<PathBuf>,
    },
    /// AUC and GAUC of a checkpoint on held-out requests.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        holdout_frac: f64,
        /// Score every request instead of the held-out tail.
        #[arg(long)]
        all: bool,
    },
    /// Time forward+backward steps of the four layout/bias variants.
    Bench {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Check a named invariant against a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train all four variants on one dataset and print a comparison table.
    Compare {
        /// Directory holding gen.toml, train.toml and model.toml.
        #[arg(long)]
        configs: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = GeneratorConfig::from_toml(&read_text(config)?)?;
    let data = generate_logs(&cfg)?;
    write_dataset(&data, out)?;
    let mut bayes = serde_json::Map::new();
    for (k, name) in data.tasks.names().iter().enumerate() {
        bayes.insert(name.clone(), bayes_optimal_auc(&data.logs, &data.truth, k)?.into());
    }
    let summary = serde_json::json!({
        "schema_version": genrank::evalbench::SCHEMA_VERSION,
        "exposures": data.logs.len(),
        "bayes_optimal_auc": bayes,
        "config": cfg,
    });
    write_json(&out.join("dataset.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn finish_training<S: Scalar>(mut trained: TrainedModel<S>, out: &Path) -> Result<()> {
    trained.save(out)?;
    write_json(&sibling(out, ".report.json"), &trained.report)?;
    let r = &trained.report;
    println!(
        "{} steps, final loss {:.5}, {:.0} tokens/s, median step {:.4}s -> {}",
        r.steps(),
        r.final_loss().unwrap_or(f64::NAN),
        r.tokens_per_sec,
        r.step_time_quantile(0.5).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn run_train(logs: &Path, train_config: &Path, model_config: &Path, out: &Path, side: Option<PathBuf>) -> Result<()> {
    let tc = TrainConfig::from_toml(&read_text(train_config)?)?;
    let mc = ModelConfig::from_toml(&read_text(model_config)?)?;
    let tasks = read_task_names(logs)?;
    if tasks.len() != mc.num_tasks {
        bail!("logs carry {} tasks but the model has {} heads", tasks.len(), mc.num_tasks);
    }
    let records = read_logs(logs, &tasks)?;
    let side = match (mc.side_dim, side) {
        (0, _) => None,
        (_, Some(p)) => Some(read_catalog(&p)?),
        (_, None) => Some(read_catalog(&logs.with_file_name("side.bin"))?),
    };
    let mut manifest = tc.manifest(&mc);
    manifest["tasks"] = serde_json::to_value(&tasks)?;
    manifest["logs"] = logs.display().to_string().into();
    write_json(&sibling(out, ".manifest.json"), &manifest)?;
    match mc.precision {
        Precision::Fp32 => finish_training(train::<f32>(&records, &tc, &mc, side.as_ref())?, out),
        Precision::Fp64 => finish_training(train::<f64>(&records, &tc, &mc, side.as_ref())?, out),
    }
}

fn run_eval(ckpt: &Path, logs: &Path, report: &Path, holdout_frac: f64, all: bool) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let tasks = read_task_names(logs)?;
    let records = read_logs(logs, &tasks)?;
    let tc = TrainConfig {
        max_len: model.config().max_len,
        holdout_frac,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let split = if all { Split::All } else { Split::Holdout(holdout_frac) };
    let names = tasks.names();
    let metrics = match &model {
        AnyModel::F32(m) => evaluate(m, &records, &tc, names, split)?,
        AnyModel::F64(m) => evaluate(m, &records, &tc, names, split)?,
    };
    write_json(report, &metrics)?;
    for t in &metrics.tasks {
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        println!("{}: auc {} gauc {} ({} users excluded)", t.task, show(t.auc), show(t.gauc), t.excluded_users);
    }
    Ok(())
}

fn run() -> Result<bool> {
    match Cli::parse().command {
        Command::GenData { config, out } => gen_data(&config, &out)?,
        Command::Train {
            logs,
            train_config,
            model_config,
            out,
            side,
        } => run_train(&logs, &train_config, &model_config, &out, side)?,
        Command::Eval {
            ckpt,
            logs,
            report,
            holdout_frac,
            all,
        } => run_eval(&ckpt, &logs, &report, holdout_frac, all)?,
        Command::Bench {
            model_config,
            n,
            c,
            reps,
            batch,
            seed,
            report,
        } => {
            if reps < MIN_REPETITIONS {
                eprintln!("warning: {reps} repetitions is below {MIN_REPETITIONS}");
            }
            let mc = ModelConfig::from_toml(&read_text(&model_config)?)?;
            let r = bench_compare(&mc, n, c, batch, reps, seed)?;
            write_json(&report, &r)?;
            for v in &r.variants {
                println!(
                    "{:<16} L={:<5} median {:.4}s p99 {:.4}s",
                    v.name, v.cost.seq_len, v.median_seconds, v.p99_seconds
                );
            }
            for s in &r.speedups {
                println!("{} over {}: {:+.1}%", s.variant, s.over, 100.0 * s.measured);
            }
        }
        Command::Probe { ckpt, name, seed } => {
            let model = load_checkpoint(&ckpt)?;
            let r = probe(&model, &name, seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            return Ok(r.passed);
        }
        Command::Compare { configs } => {
            let r = compare(&configs)?;
            write_json(&configs.join("compare.json"), &r)?;
            let md = r.to_markdown();
            std::fs::write(configs.join("compare.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
