#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mpogpt"))
}

pub fn corpus_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare_plays.txt")
}

/// First `chars` characters of the bundled corpus, written to `dir`.
pub fn small_corpus(dir: &Path, chars: usize) -> PathBuf {
    let text = std::fs::read_to_string(corpus_file()).unwrap();
    let path = dir.join("corpus.txt");
    std::fs::write(&path, text.chars().take(chars).collect::<String>()).unwrap();
    path
}

/// A model and schedule small enough to train in well under a second.
/// `train` entries override the schedule.
pub fn small_config(dir: &Path, corpus: &Path, train: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "model": {"d_model": 16, "heads": 2, "layers": 2, "context": 32, "d_ff": 32, "init_std": 0.1},
        "train": {"steps": 30, "batch": 8, "seq": 32, "lr_max": 0.01, "warmup": 5, "eval_every": 10,
                  "eval_batches": 2, "eval_batch_size": 4},
        "corpus": {"path": corpus},
    });
    if let serde_json::Value::Object(extra) = train {
        cfg["train"].as_object_mut().unwrap().extend(extra);
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.env_remove("MPOGPT_CORPUS").arg("--quiet").output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
