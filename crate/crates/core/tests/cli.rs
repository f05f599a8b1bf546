use std::path::Path;
use std::process::{Command, Output};

fn mira(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mira"))
        .args(args)
        .env_remove("MIRA_SEED")
        .output()
        .expect("spawn mira")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "adapt_epochs": 2,
            "adapters_per_task": 2,
            "model": { "model_dim": 8, "mlp_dim": 16 },
            "data": { "blobs": { "num_classes": 4, "num_domains": 2, "samples_per_class": 30, "input_dim": 8 } }
        }"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_is_reproducible_and_writes_parseable_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mira(&[
            "run",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());

    let mut reader = csv::Reader::from_reader(ma.as_slice());
    assert_eq!(
        reader.headers().unwrap(),
        vec!["step", "task", "acc", "avg_acc", "forgetting"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3, "2 tasks give 1 + 2 rows");
    assert!(rows[0][4].is_empty());

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["num_tasks"], 2);
}

#[test]
fn inspect_reports_memory_size_after_one_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ckpt = dir.path().join("t0.mira");
    let o = mira(&["adapt", "--config", &cfg, "--out", ckpt.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let o = mira(&[
        "inspect",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--probe",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for layer in v["layers"].as_array().unwrap() {
        assert_eq!(layer["size"], 2);
        assert!(layer["mean_weight_entropy"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(v["probe_samples"], 32);

    // Adapting again before consolidating is out of order.
    let o = mira(&[
        "adapt",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let next = dir.path().join("c0.mira");
    let o = mira(&[
        "consolidate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        next.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        v["next_stage"],
        serde_json::json!({"stage": "adapt", "task": 1})
    );
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mira(&["run"]).status.code(), Some(1));
    assert_eq!(mira(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        mira(&["run", "--setting", "xyz", "--out", "/tmp/x"])
            .status
            .code(),
        Some(1)
    );
    let o = Command::new(env!("CARGO_BIN_EXE_mira"))
        .args(["run", "--out", "/tmp/never"])
        .env("MIRA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.mira");
    assert_eq!(
        mira(&["inspect", "--checkpoint", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let junk = dir.path().join("junk.mira");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        mira(&["inspect", "--checkpoint", junk.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{ "adapters_per_task": 0 }"#).unwrap();
    let o = mira(&[
        "run",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
