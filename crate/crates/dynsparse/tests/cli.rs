use std::path::Path;
use std::process::{Command, Output};

use dynsparse::formats;

fn dynsparse(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsparse"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_TRAIN: &str = r#"{
  "task": {"seq_len": 16, "num_keys": 4, "num_classes": 2, "num_fillers": 8, "distractors": 4},
  "model": {"d": 16, "heads": 2, "layers": 2, "ffn": 32, "sigma": 0.5, "pred_bits": 4},
  "train": {"schedule": "from-scratch-two-phase", "dense_steps": 4, "sparse_steps": 4, "sparsity": 0.75,
            "lr": 0.003, "lambda": 0.01, "seed": 1, "batch_size": 2, "policy": "predicted",
            "eval_every": 2, "eval_samples": 8, "clip_norm": 1.0}
}"#;

#[test]
fn cost_preset_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dynsparse(&["cost", "--preset", "cost-text"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&tmp.path().join("cost_report.json"));
    assert_eq!(report["artifact"], "dynsparse");
    assert_eq!(report["command"], "cost");
    assert_eq!(report["config"]["presets"][0], "text");
    let rows = report["results"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let csv = std::fs::read_to_string(tmp.path().join("cost_breakdown.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cost.json");
    std::fs::write(&cfg, r#"{"presets": ["text"], "sparsities": [0.9], "sparsity": 0.5}"#).unwrap();
    let out = dynsparse(&["cost", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn missing_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("df.json");
    std::fs::write(&cfg, r#"{"masks": [{"kind": "diagonal", "l": 8}]}"#).unwrap();
    let out = dynsparse(&["dataflow", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dynsparse(&["cost", "--config", "/nonexistent/cost.json"], tmp.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn malformed_mask_file_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mask = tmp.path().join("bad.dsamask");
    std::fs::write(&mask, "DSAMASK v1\n4 balanced 2\n0 1\n").unwrap();
    let cfg = tmp.path().join("df.json");
    let body = serde_json::json!({"masks": [{"kind": "file", "path": mask}], "bands": [2]});
    std::fs::write(&cfg, body.to_string()).unwrap();
    let out = dynsparse(&["dataflow", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_preset_lists_alternatives() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dynsparse(&["sweep", "--preset", "nope"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep-desk"));
}

#[test]
fn dump_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dynsparse(&["train", "--preset", "train-desk", "--seed", "9", "--dump-config"], tmp.path());
    assert!(out.status.success());
    let cfg = tmp.path().join("dumped.json");
    std::fs::write(&cfg, &out.stdout).unwrap();
    let parsed: dynsparse::config::TrainCommand = dynsparse::config::load(&cfg).unwrap();
    assert_eq!(parsed.train.seed, 9);
    assert_eq!(parsed.task.seq_len, 128);
    assert!(!tmp.path().join("train_report.json").exists());
}

#[test]
fn train_then_analyse_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.json");
    std::fs::write(&cfg, TINY_TRAIN).unwrap();
    let run = tmp.path().join("run");
    let out = dynsparse(&["train", "--config", cfg.to_str().unwrap()], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.dsackpt", "metrics.jsonl", "evals.csv", "train_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    let ckpt = std::fs::read_to_string(run.join("checkpoint.dsackpt")).unwrap();
    let model = formats::read_checkpoint(&ckpt).unwrap();
    assert_eq!(formats::write_checkpoint(&model), ckpt);

    let oracle = tmp.path().join("oracle");
    let ckpt_path = run.join("checkpoint.dsackpt");
    let ocfg = tmp.path().join("oracle.json");
    let body = serde_json::json!({
        "checkpoint": ckpt_path,
        "task": {"seq_len": 16, "num_keys": 4, "num_classes": 2, "num_fillers": 8, "distractors": 4},
        "eval_samples": 8, "seed": 2, "thetas": [0.0, 0.01, 0.1]
    });
    std::fs::write(&ocfg, body.to_string()).unwrap();
    let out = dynsparse(&["oracle-sparsity", "--config", ocfg.to_str().unwrap()], &oracle);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&oracle.join("oracle_sparsity_report.json"));
    let rows = report["results"]["rows"].as_array().unwrap();
    assert_eq!(rows[0]["sparsity"], 0.0);
    assert_eq!(report["results"]["threshold_domain"], "post_softmax");

    let df = tmp.path().join("df");
    let dcfg = tmp.path().join("df.json");
    let body = serde_json::json!({
        "masks": [{"kind": "trained", "checkpoint": ckpt_path,
                   "task": {"seq_len": 16, "num_keys": 4, "num_classes": 2, "num_fillers": 8, "distractors": 4},
                   "sparsity": 0.75, "samples": 2, "seed": 3}],
        "bands": [4]
    });
    std::fs::write(&dcfg, body.to_string()).unwrap();
    let out = dynsparse(&["dataflow", "--config", dcfg.to_str().unwrap()], &df);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&df.join("dataflow_report.json"));
    let rows = report["results"]["rows"].as_array().unwrap();
    // 2 samples x 2 layers x 2 heads
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r["dominance_holds"] == true && r["closed_form_holds"] == true));
}

#[test]
fn sweep_from_checkpoint_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.json");
    std::fs::write(&cfg, TINY_TRAIN).unwrap();
    let run = tmp.path().join("run");
    assert!(dynsparse(&["train", "--config", cfg.to_str().unwrap()], &run).status.success());
    let train: serde_json::Value = serde_json::from_str(TINY_TRAIN).unwrap();
    let mut finetune = train["train"].clone();
    finetune["schedule"] = "adapt-finetune".into();
    finetune["dense_steps"] = 0.into();
    let body = serde_json::json!({
        "task": train["task"], "model": train["model"],
        "pretrain": train["train"], "finetune": finetune,
        "init_checkpoint": run.join("checkpoint.dsackpt"),
        "sigmas": [0.5], "bits": [4, 8], "sparsities": [0.75], "seeds": [1, 2],
        "random_control": true
    });
    let scfg = tmp.path().join("sweep.json");
    std::fs::write(&scfg, body.to_string()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = dynsparse(&["sweep", "--config", scfg.to_str().unwrap()], dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["sweep_report.json", "sweep.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let report = json(&a.join("sweep_report.json"));
    // per seed: 2 bit widths + 1 random control
    assert_eq!(report["results"]["rows"].as_array().unwrap().len(), 6);
    assert_eq!(report["results"]["summary"].as_array().unwrap().len(), 3);
}

#[test]
fn out_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_dynsparse"))
        .args(["dataflow", "--preset", "dataflow-fixtures"])
        .env("DYNSPARSE_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(tmp.path().join("dataflow.csv").exists());
}
