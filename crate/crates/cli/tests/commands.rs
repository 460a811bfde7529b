mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use mpogpt::commands::{CompressSummary, ModelRow, SweepReport};
use mpogpt::metrics::{read_csv, LayerRow, MetricsRow};
use serde_json::json;

fn train_dense(dir: &Path, config: &Path) -> PathBuf {
    let out = dir.join("dense");
    ok(run(bin().args(["train", "--config", s(config), "--out", s(&out)])));
    out
}

#[test]
fn train_writes_artifacts_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &corpus, json!({}));
    let out = train_dense(dir.path(), &config);
    for f in ["checkpoint.bin", "metrics.csv", "config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,train_loss,val_loss,val_acc,lr\n"));
    let rows: Vec<MetricsRow> = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 10, 20, 30]);

    let snapshot = mpogpt::config::RunConfig::load(&out.join("config.json")).unwrap();
    let mut distinct: Vec<char> = fs::read_to_string(&corpus).unwrap().chars().collect();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(snapshot.model.vocab, distinct.len());
    assert!(snapshot.corpus.sha256.is_some());

    // same run from the snapshot, into the same directory
    ok(run(bin().args(["train", "--config", s(&out.join("config.json")), "--out", s(&out)])));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn chi_flag_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 5_000);
    let config = small_config(dir.path(), &corpus, json!({}));
    let out = dir.path().join("x");
    let cases: [&[&str]; 4] = [
        &["--mode", "mpo"],
        &["--mode", "dense", "--chi", "4"],
        &["--chi", "4"],
        &["--mode", "mpo", "--chi", "0"],
    ];
    for extra in cases {
        let o = run(bin().args(["train", "--config", s(&config), "--out", s(&out)]).args(extra));
        assert_eq!(o.status.code(), Some(1), "{extra:?}: {}", stderr(&o));
    }
    assert!(!out.join("metrics.csv").exists());
    let o = ok(run(bin().args(["train", "--config", s(&config), "--mode", "mpo", "--chi", "3", "--out", s(&out)])));
    assert!(o.status.success());
    let snapshot = mpogpt::config::RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(snapshot.model.chi, Some(3));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"d_model": 30, "heads": 4}}"#).unwrap();
    let o = run(bin().args(["train", "--config", s(&bad), "--out", s(dir.path())]));
    assert_eq!(o.status.code(), Some(1));
    fs::write(&bad, "{not json").unwrap();
    let o = run(bin().args(["train", "--config", s(&bad), "--out", s(dir.path())]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.json"));
}

#[test]
fn divergence_exits_with_numeric_code_and_keeps_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &corpus, json!({"lr_max": 1e36, "clip_norm": 1e30, "warmup": 1}));
    let out = dir.path().join("run");
    let o = run(bin().args(["train", "--config", s(&config), "--out", s(&out)]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let rows: Vec<MetricsRow> = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows[0].step, 0);
    assert!(rows.last().unwrap().val_loss.is_nan());
    assert!(!out.join("checkpoint.bin").exists());
}

#[test]
fn corpus_env_override_and_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &dir.path().join("missing.txt"), json!({}));
    let out = dir.path().join("run");
    let o = run(bin().args(["train", "--config", s(&config), "--out", s(&out)]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MPOGPT_CORPUS"));
    let o = bin().args(["train", "--quiet", "--config", s(&config), "--out", s(&out)]).env("MPOGPT_CORPUS", &corpus).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["corpus"]["sha256"] = json!("00");
    fs::write(&config, cfg.to_string()).unwrap();
    let o = bin().args(["train", "--quiet", "--config", s(&config), "--out", s(&out)]).env("MPOGPT_CORPUS", &corpus).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SHA-256"));
}

#[test]
fn compress_reports_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &corpus, json!({}));
    let dense = train_dense(dir.path(), &config);
    let ckpt = dense.join("checkpoint.bin");

    let full = dir.path().join("full");
    ok(run(bin().args(["compress", "--checkpoint", s(&ckpt), "--chi", "full", "--out", s(&full)])));
    let summary: CompressSummary = serde_json::from_str(&fs::read_to_string(full.join("summary.json")).unwrap()).unwrap();
    assert!(summary.max_rel_err <= 1e-5, "{}", summary.max_rel_err);
    assert!((summary.compressed_val_loss - summary.dense_val_loss).abs() <= 1e-3);
    assert!(!full.join("metrics.csv").exists());
    let layers: Vec<LayerRow> = read_csv(&full.join("layers.csv")).unwrap();
    assert_eq!(layers.len(), 4 * 2 + 2 * 2 + 1);

    let errs = |chi: &str| -> Vec<LayerRow> {
        let out = dir.path().join(format!("chi{chi}"));
        ok(run(bin().args(["compress", "--checkpoint", s(&ckpt), "--chi", chi, "--out", s(&out)])));
        read_csv(&out.join("layers.csv")).unwrap()
    };
    let (e4, e16) = (errs("4"), errs("16"));
    for (a, b) in e4.iter().zip(&e16) {
        assert_eq!(a.layer, b.layer);
        assert!(a.rel_err > b.rel_err, "{}: {} vs {}", a.layer, a.rel_err, b.rel_err);
        assert!(a.params_mpo < b.params_mpo || a.params_mpo == b.params_mpo && a.rel_err > b.rel_err);
    }

    let tuned = dir.path().join("tuned");
    ok(run(bin().args(["compress", "--checkpoint", s(&ckpt), "--chi", "4", "--finetune", "10", "--out", s(&tuned)])));
    let rows: Vec<MetricsRow> = read_csv(&tuned.join("metrics.csv")).unwrap();
    assert_eq!(rows.first().unwrap().step, 0);
    assert_eq!(rows.last().unwrap().step, 10);

    let o = run(bin().args(["compress", "--checkpoint", s(&full.join("checkpoint.bin")), "--chi", "4", "--out", s(&tuned)]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dense"));
    for chi in ["0", "-2", "lots"] {
        let o = run(bin().args(["compress", "--checkpoint", s(&ckpt), "--chi", chi, "--out", s(&tuned)]));
        assert_eq!(o.status.code(), Some(1), "chi {chi}");
    }
}

#[test]
fn generate_contract() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &corpus, json!({}));
    let ckpt = train_dense(dir.path(), &config).join("checkpoint.bin");
    let gen = |prompt: &str, length: &str, temp: &str, seed: &str| {
        run(bin().args(["generate", "--checkpoint", s(&ckpt), "--prompt", prompt, "--length", length, "--temperature", temp, "--seed", seed]))
    };
    let a = ok(gen("ROMEO:", "40", "0", "1")).stdout;
    let b = ok(gen("ROMEO:", "40", "0", "2")).stdout;
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("ROMEO:"));
    assert_eq!(text.chars().count(), 6 + 40);

    let sampled = String::from_utf8(ok(gen("the", "25", "1.0", "7")).stdout).unwrap();
    assert_eq!(sampled.chars().count(), 28);
    assert_eq!(ok(gen("the", "25", "1.0", "7")).stdout, sampled.as_bytes());

    assert_eq!(ok(gen("the", "0", "1.0", "0")).stdout, b"the");

    let o = gen("caf\u{e9}", "5", "0", "0");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains('\u{e9}'), "{}", stderr(&o));
}

#[test]
fn sweep_report_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &corpus, json!({}));
    let out = dir.path().join("sweep");
    ok(run(bin().args(["sweep", "--config", s(&config), "--chis", "2,8,4", "--jobs", "2", "--out", s(&out)])));
    let rows: Vec<ModelRow> = read_csv(&out.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.chi).collect::<Vec<_>>(), [None, Some(8), Some(4), Some(2)]);
    assert!(rows[1..].windows(2).all(|w| w[0].params >= w[1].params));
    let dense = &rows[0];
    for r in &rows {
        assert_eq!(r.status, "ok");
        assert!((r.ratio - dense.params as f64 / r.params as f64).abs() <= 1e-9);
        assert_eq!(format!("{:.3}", r.ratio), format!("{:.3}", dense.params as f64 / r.params as f64));
        assert!((r.gap - (dense.val_acc - r.val_acc)).abs() <= 1e-9);
        assert!((r.acc_per_sqrt_n - r.val_acc / (r.params as f64).sqrt()).abs() <= 1e-9);
        let metrics: Vec<MetricsRow> = read_csv(&out.join("runs").join(&r.name).join("metrics.csv")).unwrap();
        assert_eq!(metrics.last().unwrap().val_loss, r.val_loss);
    }
    let report: SweepReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.models, rows);
    assert_eq!(report.layers.len(), 3 * 13);
    assert_eq!(read_csv::<LayerRow>(&out.join("layers.csv")).unwrap(), report.layers);

    // serial rerun reproduces every run
    let again = dir.path().join("again");
    ok(run(bin().args(["sweep", "--config", s(&config), "--chis", "8,4,2", "--jobs", "1", "--out", s(&again)])));
    for r in &rows {
        let a = fs::read(out.join("runs").join(&r.name).join("metrics.csv")).unwrap();
        let b = fs::read(again.join("runs").join(&r.name).join("metrics.csv")).unwrap();
        assert_eq!(a, b, "{}", r.name);
    }
}

#[test]
fn sweep_records_failed_rows_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 20_000);
    let config = small_config(dir.path(), &corpus, json!({"lr_max": 1e36, "clip_norm": 1e30, "warmup": 1}));
    let out = dir.path().join("sweep");
    let o = run(bin().args(["sweep", "--config", s(&config), "--chis", "4", "--out", s(&out)]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let rows: Vec<ModelRow> = read_csv(&out.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.status.starts_with("diverged")));
    assert!(rows[1].params < rows[0].params);
}

#[test]
fn help_and_config_dump() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = bin().args(["config", "--preset", "tiny"]).output().unwrap();
    assert!(o.status.success());
    let cfg: mpogpt::config::RunConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg, mpogpt::config::RunConfig::preset(mpogpt::config::Preset::Tiny));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
}
