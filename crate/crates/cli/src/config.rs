use std::fs;
use std::path::{Path, PathBuf};

use mpogpt_core::model::ModelConfig;
use mpogpt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Where the training text lives. `MPOGPT_CORPUS` overrides `path`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// Expected SHA-256 of the file, hex encoded. Checked when present.
    pub sha256: Option<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { path: PathBuf::from("data/shakespeare_plays.txt"), sha256: None }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// D=128, H=4, N=4, T=256, 2000 steps.
    Picogpt,
    /// D=32, H=2, N=2, T=64, 500 steps.
    Tiny,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Picogpt => Self::default(),
            Preset::Tiny => Self {
                model: ModelConfig::tiny(ModelConfig::default().vocab),
                train: TrainConfig::tiny(),
                corpus: CorpusConfig::default(),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_owned(), source })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
