use std::path::Path;
use std::process::{Command, Output};

fn dlm_mia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlm-mia"))
        .args(args)
        .env_remove("DLM_MIA_URL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 4] = [
    "--set",
    "oracle.synthetic_world.num_members=5",
    "--set",
    "oracle.synthetic_world.num_nonmembers=5",
];

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    dlm_mia(&args)
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn sama_on_ten_samples_writes_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(dir.path(), &["--attacks", "sama"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("config digest: "));
    let scores = read(&dir.path().join("scores.csv"));
    assert_eq!(scores.lines().count(), 11);
    assert!(scores.lines().skip(1).all(|l| l.contains(",sama,")));
    for f in ["metrics.json", "roc_sama.csv", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("failures.csv").exists());
}

#[test]
fn unknown_attack_exits_one_and_lists_attacks() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(dir.path(), &["--attacks", "sama,bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("bogus"));
    for name in ["sama", "loss", "zlib", "min_k_pp", "con_recall", "bows", "pia"] {
        assert!(err.contains(name), "{name} missing from {err}");
    }
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = dlm_mia(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"oracle": {"backend": "synthetic"}, "samples": {"synthetic": true}, "typo": 1}"#).unwrap();
    let out = dlm_mia(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("typo"));
    let out = run_small(dir.path(), &["--set", "attacks"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{"oracle": {"backend": "synthetic", "synthetic_world": {"num_members": 4, "num_nonmembers": 4}},
            "samples": {"synthetic": true}, "attacks": ["sama", "loss"], "seed": 3}"#,
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let a = dlm_mia(&["run", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(read(&out_a.join("scores.csv")).lines().count(), 17);
    let out_b = dir.path().join("b");
    let b = dlm_mia(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--set",
        "attacks.sama.schedule.steps=8",
    ]);
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let digest = |o: &Output| stdout(o).lines().next().unwrap().to_string();
    assert_ne!(digest(&a), digest(&b));
    let resolved = read(&out_b.join("config.json"));
    assert!(resolved.contains("\"steps\": 8"));
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(workers);
        let o = run_small(&out, &["--attacks", "sama,ratio,bows", "--workers", workers]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push((read(&out.join("scores.csv")), read(&out.join("metrics.json")), stdout(&o)));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);
    assert_eq!(outputs[0].2.lines().next(), outputs[1].2.lines().next());
}

#[test]
fn partial_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    let o = dlm_mia(&[
        "synth-world",
        "--out",
        world.to_str().unwrap(),
        "--draws",
        "1",
        "--set",
        "oracle.synthetic_world.num_members=3",
        "--set",
        "oracle.synthetic_world.num_nonmembers=3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // Without a shot file the context attack has nothing to condition on.
    let out = dir.path().join("run");
    let o = dlm_mia(&[
        "run",
        "--samples",
        world.join("samples.ndjson").to_str().unwrap(),
        "--attacks",
        "loss,recall",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(read(&out.join("failures.csv")).lines().count(), 7);
    assert_eq!(read(&out.join("scores.csv")).lines().count(), 7);

    let o = dlm_mia(&[
        "run",
        "--samples",
        world.join("samples.ndjson").to_str().unwrap(),
        "--shots",
        world.join("shots.ndjson").to_str().unwrap(),
        "--attacks",
        "loss,recall",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out.join("failures.csv").exists());
}

#[test]
fn metrics_is_idempotent_and_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), &["--attacks", "sama,loss"]);
    assert_eq!(o.status.code(), Some(0));
    let from_run: serde_json::Value = serde_json::from_str(&read(&dir.path().join("metrics.json"))).unwrap();
    let again = dir.path().join("again");
    let scores = dir.path().join("scores.csv");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let o = dlm_mia(&["metrics", scores.to_str().unwrap(), "--out", again.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).lines().any(|l| l.starts_with("sama")));
        snapshots.push((read(&again.join("metrics.json")), read(&again.join("roc_loss.csv"))));
    }
    assert_eq!(snapshots[0], snapshots[1]);
    let recomputed: serde_json::Value = serde_json::from_str(&snapshots[0].0).unwrap();
    for i in 0..2 {
        assert_eq!(from_run[i]["attack"], recomputed[i]["attack"]);
        assert_eq!(from_run[i]["auc"], recomputed[i]["auc"]);
        assert_eq!(from_run[i]["tpr_at"], recomputed[i]["tpr_at"]);
    }
}

#[test]
fn metrics_hand_computed_auc() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    // Members 0.9, 0.4; non-members 0.5, 0.1: three of four pairs ordered.
    std::fs::write(
        &scores,
        "sample_id,attack,score,label\na,x,0.9,member\nb,x,0.4,member\nc,x,0.5,non-member\nd,x,0.1,non-member\n",
    )
    .unwrap();
    let o = dlm_mia(&["metrics", scores.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&read(&dir.path().join("metrics.json"))).unwrap();
    assert_eq!(m[0]["auc"], 0.75);
    let roc = read(&dir.path().join("roc_x.csv"));
    assert!(roc.starts_with("fpr,tpr,threshold\n0.0,0.0,inf\n"));
}

#[test]
fn synth_world_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["synth-world", "--seed", "9", "--draws", "1", "--out", out.to_str().unwrap()];
        args.extend(SMALL);
        let o = dlm_mia(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("world digest: "));
        files.push(
            ["samples.ndjson", "shots.ndjson", "world.json", "calibration.json"].map(|f| read(&out.join(f))),
        );
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0][0].lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(files[0][0].lines().next().unwrap()).unwrap();
    assert!(first["tokens"].is_array() && first["label"].is_string());
}

#[test]
fn null_world_moments_match() {
    let dir = tempfile::tempdir().unwrap();
    let o = dlm_mia(&[
        "synth-world",
        "--null-world",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "oracle.synthetic_world.num_members=300",
        "--set",
        "oracle.synthetic_world.num_nonmembers=300",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("calibration.json"))).unwrap();
    let d = &report["diagnostics"];
    let (m, n) = (d["member"]["mean"].as_f64().unwrap(), d["nonmember"]["mean"].as_f64().unwrap());
    let (ms, ns) = (d["member"]["sd"].as_f64().unwrap(), d["nonmember"]["sd"].as_f64().unwrap());
    assert!((m - n).abs() < 0.01, "means {m} vs {n}");
    assert!((ms / ns - 1.0).abs() < 0.1, "sds {ms} vs {ns}");
}

#[test]
fn diagnose_writes_stable_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["diagnose", "--draws", "2", "--out", dir.path().to_str().unwrap()];
    args.extend(SMALL);
    let o = dlm_mia(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("config digest: "));
    let d: serde_json::Value = serde_json::from_str(&read(&dir.path().join("diagnostics.json"))).unwrap();
    for key in ["config", "member", "nonmember", "configuration_sd", "member_margin", "top_tokens"] {
        assert!(d.get(key).is_some(), "{key}");
    }
    for key in ["count", "mean", "sd", "skewness", "excess_kurtosis", "ccdf"] {
        assert!(d["member"].get(key).is_some(), "{key}");
    }
}

#[test]
fn help_lists_every_attack_with_defaults() {
    let o = dlm_mia(&["--help"]);
    let text = stdout(&o);
    for name in [
        "sama", "loss", "zlib", "lowercase", "neighbor", "min_k", "min_k_pp", "recall", "con_recall", "bows", "ratio",
        "secmi", "pia",
    ] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name}: "))), "{name}");
    }
    assert!(text.contains("N=128 subsets of m=10"));
    assert!(stdout(&dlm_mia(&["run", "--help"])).contains("con_recall: "));
}

#[test]
fn remote_without_server_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("s.ndjson");
    std::fs::write(&samples, "{\"sample_id\":\"a\",\"tokens\":[1,2,3],\"label\":\"member\"}\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dlm-mia"))
        .args(["run", "--oracle", "remote", "--samples", samples.to_str().unwrap()])
        .args(["--set", "oracle.remote.timeout_secs=1", "--set", "oracle.remote.max_retries=0"])
        .env("DLM_MIA_URL", "http://127.0.0.1:9")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("127.0.0.1:9"), "{}", stderr(&o));
}
