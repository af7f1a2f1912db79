use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rethink_core::harness::Checkpoint;

fn rethink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rethink")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let out_dir = format!("out_dir={}", dir.display());
    let mut args = vec![
        "train",
        "--set",
        "train_path=synthetic:12:1",
        "--set",
        "test_path=synthetic:6:2",
        "--set",
        "network=tiny28",
        "--set",
        "batch_size=8",
        "--set",
        "phase1_epochs=2",
        "--set",
        "phase2_epochs=2",
        "--set",
        &out_dir,
    ];
    args.extend_from_slice(extra);
    rethink(&args)
}

/// Metrics rows with the wall-clock column removed.
fn metrics_without_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn train_prints_config_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("seed = 1"));
    assert!(text.contains("batch_size = 8"));
    assert!(text.contains("phase 2 epoch 2/2"));
    for f in ["phase1.ckpt", "final.ckpt", "metrics.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn same_seed_gives_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_small(a.path(), &[]).status.success());
    assert!(train_small(b.path(), &[]).status.success());
    let (ma, mb) = (metrics_without_time(&a.path().join("metrics.csv")), metrics_without_time(&b.path().join("metrics.csv")));
    assert_eq!(ma.len(), 1 + 2 * 4);
    assert_eq!(ma, mb);
    let load = |d: &Path| Checkpoint::<f32>::load(d.join("final.ckpt")).unwrap();
    let (ca, cb) = (load(a.path()), load(b.path()));
    assert_eq!(ca.model, cb.model);
    assert_eq!(ca.optim, cb.optim);

    let c = tempfile::tempdir().unwrap();
    assert!(train_small(c.path(), &["--set", "seed=2"]).status.success());
    assert_ne!(metrics_without_time(&c.path().join("metrics.csv")), ma);
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "train_path = synthetic:6:1\nnetwork = tiny28\nbatch_size = 4\nphase1_epochs = 1\nphase2_epochs = 1\nprecision = double\nout_dir = {}\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let o = rethink(&["train", "--config", cfg.to_str().unwrap(), "--set", "iterations=3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("iterations = 3"));
    assert!(stdout(&o).contains("precision = double"));
    let ev = rethink(&["eval", "--checkpoint", dir.path().join("final.ckpt").to_str().unwrap(), "--data", "synthetic:5:9", "--k", "1,2"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let text = stdout(&ev);
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(['1', '2', '3'])).count(), 3, "{text}");
    assert!(text.contains("top-2"));
}

#[test]
fn eval_and_inspect_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), &[]).status.success());
    let ckpt = dir.path().join("final.ckpt");
    let ev = rethink(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--k", "1,2"]);
    assert!(ev.status.success());
    assert!(stdout(&ev).contains("evaluated samples = 12"));

    let csv = dir.path().join("emphasis.csv");
    let ins = rethink(&[
        "inspect-emphasis",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--classes",
        "0,1",
        "--threshold",
        "0.7",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(ins.status.success(), "{}", String::from_utf8_lossy(&ins.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("row,sample,label"));
    assert_eq!(text.lines().filter(|l| l.starts_with("sample,")).count(), 12 * 2);
    for row in text.lines().filter(|l| l.starts_with("sample,")) {
        let values: Vec<f64> = row.rsplit(',').next().unwrap().split(';').map(|v| v.parse().unwrap()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - 1.0).abs() < 1e-5, "{row}");
    }

    let stdout_csv = rethink(&["inspect-emphasis", "--checkpoint", ckpt.to_str().unwrap(), "--classes", "0,1"]);
    assert!(stdout(&stdout_csv).starts_with("row,sample,label"));

    let missing = rethink(&["inspect-emphasis", "--checkpoint", ckpt.to_str().unwrap(), "--classes", "0,5"]);
    assert_eq!(missing.status.code(), Some(2));
    let phase1 = rethink(&["inspect-emphasis", "--checkpoint", dir.path().join("phase1.ckpt").to_str().unwrap(), "--classes", "0,1"]);
    assert_eq!(phase1.status.code(), Some(1));
}

#[test]
fn resume_continues_a_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), &[]).status.success());
    let o = rethink(&["train", "--resume", dir.path().join("latest.ckpt").to_str().unwrap(), "--set", "phase2_epochs=3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("phase 2 epoch 3/3"));
    let rows = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(rows.lines().any(|l| l.starts_with("2,5,train")));
}

#[test]
fn gradcheck_passes_and_mutation_fails() {
    let ok = rethink(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = stdout(&ok);
    assert!(text.contains("PASS: all 5 networks"));
    for t in 1..=3 {
        assert!(text.contains(&format!("T={t} PASS")), "{text}");
    }
    let bad = rethink(&["gradcheck", "--mutate"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn preview_renders_amat_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("digit.amat");
    let mut fields: Vec<String> = (0..784).map(|i| if i % 28 == 14 && (4..24).contains(&(i / 28)) { "1".into() } else { "0".into() }).collect();
    fields.push("7".into());
    fs::write(&path, fields.join(" ") + "\n").unwrap();
    let o = rethink(&["preview", "--data", path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).take(28).collect();
    assert_eq!(rows[10].find('@'), Some(14));
    assert!(text.contains("label: 7"));
    assert_eq!(rethink(&["preview", "--data", path.to_str().unwrap(), "--index", "1"]).status.code(), Some(1));
}

#[test]
fn error_exit_codes() {
    assert_eq!(rethink(&["train", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(rethink(&["train"]).status.code(), Some(1));
    assert_eq!(rethink(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rethink(&["--help"]).status.code(), Some(0));
    assert_eq!(rethink(&["preview", "--data", "/no/such/file.amat"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.amat");
    fs::write(&bad, "0.5 0.5 1\n").unwrap();
    let o = rethink(&["preview", "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":1:"));
    let diverge = train_small(dir.path(), &["--set", "lr=1e30", "--set", "momentum=0", "--set", "normalize=false"]);
    assert_eq!(diverge.status.code(), Some(3));
    assert!(dir.path().join("diagnostic.ckpt").exists());
    fs::write(dir.path().join("junk.ckpt"), b"nope").unwrap();
    let o = rethink(&["eval", "--checkpoint", dir.path().join("junk.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
