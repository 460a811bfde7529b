//! Character vocabulary, train/validation split and batch sampling.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Distinct characters of a corpus in code-point order; a character's id is
/// its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            bail!(Input, "cannot build a vocabulary from empty text");
        }
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Self { chars })
    }

    /// Vocabulary from an explicit character list, which must be strictly
    /// increasing.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() || chars.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Input, "vocabulary characters must be non-empty, sorted and distinct");
        }
        Ok(Self { chars })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match self.id(c) {
                Some(id) => Ok(id),
                None => bail!(Input, "character {c:?} is not in the vocabulary"),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| match self.chars.get(i) {
                Some(&c) => Ok(c),
                None => bail!(Input, "token id {i} out of range for vocabulary of {}", self.len()),
            })
            .collect()
    }
}

/// Tokenised corpus split at `floor(0.9 * len)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitCorpus {
    pub vocab: CharVocab,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub const TRAIN_FRACTION_NUM: usize = 9;
pub const TRAIN_FRACTION_DEN: usize = 10;

impl SplitCorpus {
    pub fn new(text: &str) -> Result<Self> {
        let vocab = CharVocab::build(text)?;
        let mut ids = vocab.encode(text)?;
        let cut = ids.len() * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
        let val = ids.split_off(cut);
        Ok(Self { vocab, train: ids, val })
    }
}

/// Inputs and next-token targets, both `batch x seq` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// `batch` offsets drawn uniformly from `0..=len - seq - 1`.
pub fn sample_offsets<R: Rng + ?Sized>(len: usize, batch: usize, seq: usize, rng: &mut R) -> Result<Vec<usize>> {
    if seq == 0 || batch == 0 {
        bail!(Input, "batch size and sequence length must be positive");
    }
    if len < seq + 1 {
        bail!(Input, "split of {len} tokens is too short for sequences of {seq} (+1 target)");
    }
    Ok((0..batch).map(|_| rng.random_range(0..len - seq)).collect())
}

pub fn sample_batch<R: Rng + ?Sized>(tokens: &[usize], batch: usize, seq: usize, rng: &mut R) -> Result<Batch> {
    let offsets = sample_offsets(tokens.len(), batch, seq, rng)?;
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for off in offsets {
        inputs.extend_from_slice(&tokens[off..off + seq]);
        targets.extend_from_slice(&tokens[off + 1..off + seq + 1]);
    }
    Ok(Batch { inputs, targets, batch, seq })
}
