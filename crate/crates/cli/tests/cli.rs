//! End-to-end behavior of the `cogpath` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogpath"))
        .args(args)
        .output()
        .expect("spawn cogpath")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn small_data(root: &Path, beta: &str) -> PathBuf {
    let dir = root.join(format!("data-{beta}"));
    ok(&[
        "gen-data", "--seed", "3", "--beta", beta, "--n-train", "320", "--n-test", "96", "--out",
        s(&dir),
    ]);
    dir
}

fn quick_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train", "--dataset", s(data), "--out", s(out), "--epochs", "1", "--batch", "64", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    ok(&["gen-data", "--seed", "7", "--n-train", "400", "--n-test", "100", "--out", s(&a)]);
    fs::rename(&a, &b).unwrap();
    ok(&["gen-data", "--seed", "7", "--n-train", "400", "--n-test", "100", "--out", s(&a)]);
    for name in ["gen_config.json", "meta.json", "train.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn unbiased_generation_reports_no_shift() {
    let root = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "gen-data", "--beta", "0", "--n-train", "20000", "--n-test", "5000", "--out",
        s(&root.path().join("d")),
    ]);
    let tvs: Vec<f64> = stdout
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(tvs.len(), 3);
    assert!(tvs.iter().all(|&tv| tv < 0.05), "{tvs:?}");
}

#[test]
fn default_sizes_hit_disk() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("d");
    ok(&["gen-data", "--out", s(&dir)]);
    let lines = |n: &str| fs::read_to_string(dir.join(n)).unwrap().lines().count();
    assert_eq!(lines("train.jsonl"), 20_000);
    assert_eq!(lines("test.jsonl"), 5_000);
}

#[test]
fn invalid_bias_exits_two_without_output() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("d");
    let out = run(&["gen-data", "--beta", "1.5", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.exists());
}

#[test]
fn missing_dataset_exits_two_without_run_dir() {
    let root = tempfile::tempdir().unwrap();
    let run_dir = root.path().join("run");
    let out = run(&[
        "train", "--dataset", s(&root.path().join("nope")), "--out", s(&run_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run_dir.exists());
}

#[test]
fn budget_violation_exits_two() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let run_dir = root.path().join("run");
    let out = run(&[
        "train", "--dataset", s(&data), "--out", s(&run_dir), "--hidden2", "200",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
    assert!(!run_dir.exists());
}

#[test]
fn train_records_config_and_is_bit_identical() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    // the resolved config records the output path, so both runs use the same one
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    quick_train(&data, &a, &["--n1", "3", "--n2", "3"]);
    fs::rename(&a, &b).unwrap();
    quick_train(&data, &a, &["--n1", "3", "--n2", "3"]);
    let cfg = json(a.join("config.json"));
    assert_eq!(cfg["train"]["model"]["n1"], 3);
    assert_eq!(cfg["train"]["model"]["n2"], 3);
    assert_eq!(cfg["train"]["seed"], 5);
    for name in ["config.json", "last.ckpt", "best.ckpt", "log.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let cfg_path = root.path().join("cfg.json");
    fs::write(
        &cfg_path,
        r#"{"train": {"epochs": 1, "batch_size": 64, "seed": 9, "model": {"n1": 2, "n2": 2}}}"#,
    )
    .unwrap();
    let out = root.path().join("run");
    ok(&[
        "train", "--config", s(&cfg_path), "--dataset", s(&data), "--out", s(&out), "--seed", "4",
    ]);
    let cfg = json(out.join("config.json"));
    assert_eq!(cfg["train"]["seed"], 4);
    assert_eq!(cfg["train"]["model"]["n1"], 2);
    assert_eq!(cfg["train"]["epochs"], 1);
}

#[test]
fn eval_reproduces_logged_accuracy() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let run_dir = root.path().join("run");
    quick_train(&data, &run_dir, &[]);
    let log = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    let logged: f64 = log.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();

    let eval_dir = root.path().join("eval");
    ok(&[
        "eval", "--variant", "z_final", "--checkpoint", s(&run_dir.join("last.ckpt")), "--dataset",
        s(&data), "--out", s(&eval_dir),
    ]);
    let report = json(eval_dir.join("eval.json"));
    assert_eq!(report["overall"].as_f64().unwrap(), logged);
    for name in ["eval.csv", "eval_config.json", "answers_t0.svg", "routing_t2.svg", "routing.json"] {
        assert!(eval_dir.join(name).is_file(), "{name}");
    }
}

#[test]
fn unknown_variant_lists_valid_names() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let run_dir = root.path().join("run");
    quick_train(&data, &run_dir, &[]);
    let eval_dir = root.path().join("eval");
    let out = run(&[
        "eval", "--variant", "z_best", "--checkpoint", s(&run_dir.join("last.ckpt")), "--dataset",
        s(&data), "--out", s(&eval_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["z_final", "rand_route", "broken_x"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!eval_dir.exists());
}

#[test]
fn ablate_emits_every_variant() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let run_dir = root.path().join("run");
    quick_train(&data, &run_dir, &[]);
    let out = root.path().join("ablate");
    ok(&[
        "ablate", "--checkpoint", s(&run_dir.join("best.ckpt")), "--dataset", s(&data), "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "z_final", "z11_only", "z10_only", "zu_only", "excl_z11", "excl_z10", "excl_zu",
            "rand_route", "broken_x"
        ]
    );
    assert_eq!(json(out.join("ablation.json")).as_array().unwrap().len(), 9);
}

#[test]
fn ablate_rejects_monolithic_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let run_dir = root.path().join("run");
    quick_train(&data, &run_dir, &["--monolithic"]);
    let out = root.path().join("ablate");
    let res = run(&[
        "ablate", "--checkpoint", s(&run_dir.join("last.ckpt")), "--dataset", s(&data), "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn sweep_grid_has_one_row_per_pair() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let out = root.path().join("sweep");
    ok(&[
        "sweep", "--dataset", s(&data), "--out", s(&out), "--epochs", "1", "--batch", "64",
        "--seeds", "0", "--pairs", "2,2", "3,3", "5,5", "10,10",
    ]);
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(!out.join("khot.csv").exists());
    assert_eq!(json(out.join("grid.json")).as_array().unwrap().len(), 4);
}

#[test]
fn sweep_khot_rows_and_bad_k() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "0.9");
    let out = root.path().join("sweep");
    ok(&[
        "sweep", "--dataset", s(&data), "--out", s(&out), "--epochs", "1", "--batch", "64",
        "--seeds", "0", "1", "--ks", "1", "2",
    ]);
    let csv = fs::read_to_string(out.join("khot.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(!out.join("grid.csv").exists());

    let bad = root.path().join("bad");
    let res = run(&["sweep", "--dataset", s(&data), "--out", s(&bad), "--ks", "4"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!bad.exists());
}
