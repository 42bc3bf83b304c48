mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use ddsr::data::{load_predictions, Dataset};
use ddsr::fusion::fusion_report;

/// `synth` with a small target set; returns the benchmark directory.
fn small_bench(dir: &Path) -> PathBuf {
    let b = p(dir, "bench");
    let out = ddsr(&["synth", "--n", "300", "--out", s(&b)]);
    assert!(out.status.success(), "{}", status_line(&out));
    b
}

const SHORT: [&str; 6] = ["--epochs", "4", "--stage-one-epochs", "2", "--prompt-period", "1"];

fn run_args<'a>(bench: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run", "--benchmark", bench, "--out", out];
    v.extend_from_slice(&SHORT);
    v.extend_from_slice(extra);
    v
}

fn assert_error(out: &std::process::Output, kind: &str, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(status_line(out), format!("ddsr-status: error {kind} exit={code}"));
}

#[test]
fn synth_writes_digest_of_target() {
    let dir = tempfile::tempdir().unwrap();
    let b = small_bench(dir.path());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("benchmark.json")).unwrap()).unwrap();
    let digest = ddsr::cli::sha256_file(&b.join("target.csv")).unwrap();
    assert_eq!(meta["target_sha256"], digest);
    let bayes = meta["bayes_accuracy"].as_f64().unwrap();
    assert!(bayes > 0.25 && bayes <= 1.0);
    let data = Dataset::load(&b.join("target.csv")).unwrap();
    assert_eq!((data.len(), data.dim(), data.classes()), (300, 8, 4));
}

#[test]
fn run_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let bench = p(&b, "benchmark.json");
    let out_dir = p(d, "run");
    let out = ddsr(&run_args(s(&bench), s(&out_dir), &["--plot"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(status_line(&out), "ddsr-status: ok run");

    for f in [
        "manifest.json",
        "metrics.ndjson",
        "fused_epoch1.csv",
        "stage_one.ckpt",
        "final.ckpt",
        "predictions.csv",
        "summary.json",
        "plot/accuracy.dat",
        "plot/alpha.dat",
    ] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"][0]["sha256"], ddsr::cli::sha256_file(&bench).unwrap());
    assert_eq!(manifest["config"]["epochs"], 4);

    let metrics = fs::read_to_string(out_dir.join("metrics.ndjson")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[3]["stage"], 2);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let final_acc = summary["final_accuracy"].as_f64().unwrap();

    let report = p(d, "eval.json");
    let out = ddsr(&[
        "eval",
        "--checkpoint",
        s(&out_dir.join("final.ckpt")),
        "--data",
        s(&b.join("target.csv")),
        "--out",
        s(&report),
    ]);
    assert!(out.status.success());
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(eval["accuracy"].as_f64().unwrap(), final_acc);

    let preds = load_predictions(&out_dir.join("predictions.csv"), Some(4)).unwrap();
    let data = Dataset::load(&b.join("target.csv")).unwrap();
    let hits = preds
        .argmax_labels()
        .iter()
        .zip(data.labels().unwrap())
        .filter(|(a, b)| a == b)
        .count();
    assert_eq!(hits as f64 / data.len() as f64, final_acc);
}

#[test]
fn fuse_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let out = ddsr(&["teachers", "--benchmark", s(&b.join("benchmark.json")), "--out", s(&p(d, "t"))]);
    assert!(out.status.success());
    let (tb, tc) = (p(d, "t/teacher_b.csv"), p(d, "t/teacher_c.csv"));
    let report_path = p(d, "report.json");
    let out = ddsr(&[
        "fuse",
        "--black-box",
        s(&tb),
        "--vil",
        s(&tc),
        "--threshold",
        "0.08",
        "--out",
        s(&p(d, "fused.csv")),
        "--report",
        s(&report_path),
    ]);
    assert!(out.status.success());
    let yb = load_predictions(&tb, None).unwrap();
    let yc = load_predictions(&tc, None).unwrap();
    let expect = fusion_report(&yb, &yc, 0.08).unwrap();
    let got: ddsr::fusion::FusionReport = serde_json::from_str(&fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(got, expect);

    let fused = load_predictions(&p(d, "fused.csv"), Some(4)).unwrap();
    for ((f, b), c) in fused.data().iter().zip(yb.data()).zip(yc.data()) {
        let want = expect.clip_weight * c + (1.0 - expect.clip_weight) * b;
        assert!((f - want).abs() <= 1e-15);
    }
}

#[test]
fn missing_input_is_data_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let out_dir = p(d, "run");
    let out = ddsr(&[
        "run",
        "--data",
        s(&p(d, "absent.csv")),
        "--benchmark",
        s(&b.join("benchmark.json")),
        "--out",
        s(&out_dir),
    ]);
    assert_error(&out, "data", 3);
    assert!(!out_dir.exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let bench = b.join("benchmark.json");

    let out = ddsr(&run_args(s(&bench), s(&p(d, "r1")), &["--config", s(&p(d, "none.json"))]));
    assert_error(&out, "config", 2);

    let cfg = p(d, "cfg.json");
    fs::write(&cfg, r#"{"gamma": 0.84, "learning_rate": 0.1}"#).unwrap();
    let out = ddsr(&run_args(s(&bench), s(&p(d, "r2")), &["--config", s(&cfg)]));
    assert_error(&out, "config", 2);

    let out = ddsr(&run_args(s(&bench), s(&p(d, "r3")), &["--beta", "1.5"]));
    assert_error(&out, "config", 2);
    assert!(!p(d, "r3").exists());

    // A file value the flags repair is accepted.
    fs::write(&cfg, r#"{"gamma": 2.0}"#).unwrap();
    let out = ddsr(&run_args(s(&bench), s(&p(d, "r4")), &["--config", s(&cfg), "--gamma", "0.5"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_without_labels_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let out = ddsr(&run_args(s(&b.join("benchmark.json")), s(&p(d, "run")), &["--stage", "one-only"]));
    assert!(out.status.success());
    let unlabeled = p(d, "unlabeled.csv");
    Dataset::load(&b.join("target.csv")).unwrap().without_labels().save(&unlabeled).unwrap();
    let out = ddsr(&[
        "eval",
        "--checkpoint",
        s(&p(d, "run/final.ckpt")),
        "--data",
        s(&unlabeled),
    ]);
    assert_error(&out, "unsupported-evaluation", 5);

    // Training itself works without labels and reports no accuracy.
    let out = ddsr(&[
        "run",
        "--data",
        s(&unlabeled),
        "--benchmark",
        s(&b.join("benchmark.json")),
        "--out",
        s(&p(d, "blind")),
        "--epochs",
        "3",
        "--stage-one-epochs",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p(d, "blind/summary.json")).unwrap()).unwrap();
    assert!(summary["final_accuracy"].is_null());
}

#[test]
fn malformed_teacher_file_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let out = ddsr(&["teachers", "--benchmark", s(&b.join("benchmark.json")), "--out", s(&p(d, "t"))]);
    assert!(out.status.success());
    let tb = p(d, "t/teacher_b.csv");
    let text = fs::read_to_string(&tb).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let id = lines[3].split(',').next().unwrap().to_string();
    lines[3] = format!("{id},0.5,0.2,0.1,0.1");
    let bad = p(d, "bad.csv");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = ddsr(&[
        "fuse",
        "--black-box",
        s(&bad),
        "--vil",
        s(&p(d, "t/teacher_c.csv")),
        "--out",
        s(&p(d, "f.csv")),
    ]);
    assert_error(&out, "data", 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:4:"));

    // A teacher file missing one sample id.
    lines.remove(3);
    let short = p(d, "short.csv");
    fs::write(&short, lines.join("\n") + "\n").unwrap();
    let out = ddsr(&[
        "run",
        "--data",
        s(&b.join("target.csv")),
        "--teacher-b",
        s(&short),
        "--benchmark",
        s(&b.join("benchmark.json")),
        "--out",
        s(&p(d, "run")),
    ]);
    assert_error(&out, "data", 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("`{id}`")));
}

#[test]
fn exploding_learning_rate_is_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let out = ddsr(&run_args(s(&b.join("benchmark.json")), s(&p(d, "run")), &["--lr0", "1e300"]));
    assert_error(&out, "divergence", 4);
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let b = small_bench(d);
    let out_dir = p(d, "abl");
    let bench = b.join("benchmark.json");
    let mut args = vec![
        "ablate",
        "--benchmark",
        s(&bench),
        "--out",
        s(&out_dir),
        "--axis",
        "switches",
        "--values",
        "im,sr",
    ];
    args.extend_from_slice(&SHORT);
    let out = ddsr(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["full", "without-im", "without-sr"]);
    assert_eq!(v["rows"][2]["max_abs_od"], 0.0);
    let dat = fs::read_to_string(out_dir.join("ablation.dat")).unwrap();
    assert_eq!(dat.lines().count(), 4);

    let out = ddsr(&[
        "ablate",
        "--benchmark",
        s(&b.join("benchmark.json")),
        "--out",
        s(&p(d, "abl2")),
        "--axis",
        "gamma",
        "--values",
        "0",
    ]);
    assert_error(&out, "config", 2);
}
