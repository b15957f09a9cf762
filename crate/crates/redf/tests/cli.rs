use std::fs;
use std::path::Path;
use std::process::Command;

use redf::csv::{load_dataset, parse_table};
use redf::report::MetricsReport;

const TINY: &[&str] = &[
    "--lookback", "32", "--horizon", "8", "--patch_size", "8", "--patch_stride", "4",
    "--hidden_dim", "8", "--heads", "2", "--epochs", "1", "--train_stride", "24",
];

fn redf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_redf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = redf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--channels", "2", "--train-len", "500", "--test-len", "300", "--events", "3", "--seed", "5"]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn full_pipeline_writes_every_artefact() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data);
    for f in ["train.csv", "test.csv", "test_label.csv", "spec.json", "run_meta.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    train(&data, &run, &[]);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    ok(&["score", "--data", d, "--out", r]);
    ok(&["eval", "--out", r, "--anomaly_ratio", "2"]);
    ok(&["forecast", "--data", d, "--out", r]);
    ok(&["ad-score", "--data", d, "--out", r]);

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,L_rem,L_pred,L_contra,total"));
    assert_eq!(log.lines().count(), 2);

    let scores = fs::read_to_string(run.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("timestep,score,label"));
    assert_eq!(scores.lines().count(), 1 + 300 - 32);

    let m: MetricsReport = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&m.aff_f1));
    assert_eq!(m.r_pct, 2.0);
    assert_eq!(m.threshold_split, "pooled");

    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_meta.json")).unwrap()).unwrap();
    for cmd in ["train", "score", "eval", "forecast", "ad-score"] {
        let entry = &meta[cmd];
        assert!(entry["content_hash"].as_str().is_some_and(|h| h.len() == 64), "{cmd}");
    }
    assert_eq!(meta["train"]["config"]["lookback"], "32");
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, &[]);
    train(&data, &b, &[]);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());
}

#[test]
fn ablation_switches_reach_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    train(&data, &run, &["--no-msp", "--no-contrastive-loss", "--no-graph", "--mask-mode", "soft"]);
    let model = redf::checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(model.config.msp_count, 0);
    assert_eq!(model.config.lambda_contra, 0.0);
    assert!(!model.config.use_graph);
    assert_eq!(model.config.mask_mode.as_str(), "soft");
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let file = tmp.path().join("run.cfg");
    fs::write(&file, "# desk run\nepochs = 3\nseed = 9\n").unwrap();
    let run = tmp.path().join("run");
    train(&data, &run, &["--config", file.to_str().unwrap(), "--seed", "4"]);
    let model = redf::checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!((model.config.epochs, model.config.seed), (1, 4));
    assert_eq!(model.config.num_channels, 2);
}

#[test]
fn exit_codes() {
    assert_eq!(redf(&["train", "--bogus", "1"]).status.code(), Some(1));
    assert_eq!(redf(&[]).status.code(), Some(1));
    assert_eq!(redf(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().to_str().unwrap();
    let out = redf(&["eval", "--out", empty]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scores.csv"));
    assert_eq!(redf(&["train", "--data", empty]).status.code(), Some(2));

    let data = tmp.path().join("data");
    synth(&data);
    let d = data.to_str().unwrap();
    assert_eq!(redf(&["train", "--data", d, "--horizon", "zero"]).status.code(), Some(1));
    assert_eq!(redf(&["train", "--data", d, "--num_channels", "3"]).status.code(), Some(2));
}

#[test]
fn loader_fills_gaps_and_checks_lengths() {
    let t = parse_table("a,b\n1,2\n,NaN\n3,x\n", "t").unwrap();
    assert_eq!(t.names, ["a", "b"]);
    assert_eq!(t.values, [1.0, 1.0, 3.0, 2.0, 2.0, 2.0]);
    assert!(parse_table("a,b\n1\n", "t").is_err());

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("train.csv"), "a,b\n1,2\n3,4\n").unwrap();
    fs::write(dir.join("test.csv"), "a,b\n5,6\n7,8\n9,10\n").unwrap();
    fs::write(dir.join("test_label.csv"), "label\n0\n1\n").unwrap();
    assert!(load_dataset(dir).is_err());
    fs::write(dir.join("test_label.csv"), "label\n0\n1\n0\n").unwrap();
    let ds = load_dataset(dir).unwrap();
    assert_eq!((ds.train_len, ds.test_len, ds.channels()), (2, 3, 2));
    assert_eq!(ds.test_labels, [0, 1, 0]);
}
