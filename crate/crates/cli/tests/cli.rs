use std::path::Path;
use std::process::{Command, Output};

fn genrank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genrank"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_configs(dir: &Path) {
    std::fs::write(
        dir.join("gen.toml"),
        "num_users = 12\nnum_items = 40\nrequests_per_user = 6\nitems_per_request = 3\nseed = 2\n",
    )
    .unwrap();
    std::fs::write(dir.join("train.toml"), "batch_size = 4\nmax_len = 32\n").unwrap();
    std::fs::write(
        dir.join("model.toml"),
        "num_blocks = 1\nnum_heads = 2\nhidden_dim = 8\nnum_items = 40\nmax_len = 32\nprecision = \"Fp64\"\n",
    )
    .unwrap();
}

#[test]
fn data_train_eval_probe_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_configs(d);
    ok(genrank(d, &["gen-data", "--config", "gen.toml", "--out", "data"]));
    let summary = json(&d.join("data/dataset.json"));
    assert_eq!(summary["exposures"], 12 * 6 * 3);
    assert!(summary["bayes_optimal_auc"]["click"].as_f64().unwrap() > 0.5);

    let train = ["train", "--logs", "data/logs.jsonl", "--train-config", "train.toml", "--model-config", "model.toml"];
    ok(genrank(d, &[&train[..], &["--out", "a.grnk"]].concat()));
    ok(genrank(d, &[&train[..], &["--out", "b.grnk"]].concat()));
    assert_eq!(std::fs::read(d.join("a.grnk")).unwrap(), std::fs::read(d.join("b.grnk")).unwrap());
    assert_eq!(&std::fs::read(d.join("a.grnk")).unwrap()[..4], b"GRNK");

    let manifest = json(&d.join("a.grnk.manifest.json"));
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["train"]["seed"], 0);
    assert_eq!(manifest["model"]["hidden_dim"], 8);
    assert_eq!(manifest["tasks"], serde_json::json!(["click", "engage"]));
    let report = json(&d.join("a.grnk.report.json"));
    assert_eq!(report["loss_trace"].as_array().unwrap().len(), report["step_seconds"].as_array().unwrap().len());

    ok(genrank(d, &["eval", "--ckpt", "a.grnk", "--logs", "data/logs.jsonl", "--report", "eval.json"]));
    let eval = json(&d.join("eval.json"));
    assert_eq!(eval["schema_version"], 1);
    assert_eq!(eval["tasks"][0]["task"], "click");

    let probe = ok(genrank(d, &["probe", "--ckpt", "a.grnk", "--name", "candidate-isolation"]));
    let probe: serde_json::Value = serde_json::from_str(&probe).unwrap();
    assert_eq!(probe["passed"], true);
    assert_eq!(probe["max_violation"], 0.0);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_configs(d);
    ok(genrank(d, &["gen-data", "--config", "gen.toml", "--out", "data"]));
    std::fs::write(d.join("bad.toml"), "hidden_dimm = 8\n").unwrap();
    let out = genrank(
        d,
        &["train", "--logs", "data/logs.jsonl", "--train-config", "train.toml", "--model-config", "bad.toml", "--out", "x"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hidden_dimm"));

    let ckpt = ["train", "--logs", "data/logs.jsonl", "--train-config", "train.toml", "--model-config", "model.toml", "--out", "m.grnk"];
    ok(genrank(d, &ckpt));
    let out = genrank(d, &["probe", "--ckpt", "m.grnk", "--name", "no-such-probe"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("length-law"));

    let mut bytes = std::fs::read(d.join("m.grnk")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(d.join("m.grnk"), bytes).unwrap();
    let out = genrank(d, &["eval", "--ckpt", "m.grnk", "--logs", "data/logs.jsonl", "--report", "e.json"]);
    assert!(!out.status.success());
}

#[test]
fn bench_and_compare_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_configs(d);
    let out = genrank(d, &["bench", "--model-config", "model.toml", "--n", "12", "--c", "3", "--reps", "4", "--batch", "2", "--report", "bench.json"]);
    let stdout = ok(out);
    assert!(stdout.contains("genrank over baseline"));
    let bench = json(&d.join("bench.json"));
    assert_eq!(bench["variants"].as_array().unwrap().len(), 4);
    assert_eq!(bench["warnings"].as_array().unwrap().len(), 1);

    let table = ok(genrank(d, &["compare", "--configs", "."]));
    assert_eq!(table.lines().count(), 6);
    assert!(table.contains("+94.8%"));
    assert_eq!(json(&d.join("compare.json"))["variants"].as_array().unwrap().len(), 4);
}
