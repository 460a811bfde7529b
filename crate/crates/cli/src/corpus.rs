use std::fs;
use std::path::PathBuf;

use mpogpt_core::data::SplitCorpus;
use sha2::{Digest, Sha256};

use crate::config::CorpusConfig;
use crate::error::{CliError, Result};

pub const CORPUS_ENV: &str = "MPOGPT_CORPUS";

/// A loaded and split corpus with its provenance.
pub struct Corpus {
    pub path: PathBuf,
    pub sha256: String,
    pub split: SplitCorpus,
}

impl Corpus {
    /// The configuration that reproduces exactly this corpus.
    pub fn resolved(&self) -> CorpusConfig {
        CorpusConfig { path: self.path.clone(), sha256: Some(self.sha256.clone()) }
    }
}

pub fn resolve_path(cfg: &CorpusConfig) -> PathBuf {
    match std::env::var_os(CORPUS_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => cfg.path.clone(),
    }
}

pub fn load(cfg: &CorpusConfig) -> Result<Corpus> {
    let path = resolve_path(cfg);
    let bytes = fs::read(&path).map_err(|e| CliError::Corpus(format!("{}: {e} (set {CORPUS_ENV} or corpus.path)", path.display())))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    if let Some(expected) = &cfg.sha256 {
        if !expected.eq_ignore_ascii_case(&sha256) {
            return Err(CliError::Corpus(format!("{}: SHA-256 {sha256} does not match expected {expected}", path.display())));
        }
    }
    let text = String::from_utf8(bytes).map_err(|e| CliError::Corpus(format!("{}: not UTF-8: {e}", path.display())))?;
    let split = SplitCorpus::new(&text)?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(CliError::Corpus(format!("{}: too short to split", path.display())));
    }
    Ok(Corpus { path, sha256, split })
}
