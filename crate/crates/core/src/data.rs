//! Byte-level tokenization, corpus splits and calibration sampling.

use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Tokens;

/// Byte values 0..=255 map to themselves; two specials follow.
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

/// Inverse of [`tokenize`]; special tokens carry no bytes and are dropped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// Raw corpus bytes with a contiguous train prefix and holdout suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
    train: Range<usize>,
    holdout: Range<usize>,
}

impl Corpus {
    /// Splits off the last `holdout_frac` of the bytes as holdout.
    pub fn new(bytes: Vec<u8>, holdout_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_frac) {
            return Err(Error::InvalidConfig(alloc::format!(
                "holdout fraction {holdout_frac} outside [0, 1)"
            )));
        }
        let n = bytes.len();
        let cut = n - (n as f64 * holdout_frac) as usize;
        Ok(Self {
            bytes,
            train: 0..cut,
            holdout: cut..n,
        })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_range(&self) -> Range<usize> {
        self.train.clone()
    }

    pub fn holdout_range(&self) -> Range<usize> {
        self.holdout.clone()
    }

    pub fn train_bytes(&self) -> &[u8] {
        &self.bytes[self.train.clone()]
    }

    pub fn holdout_bytes(&self) -> &[u8] {
        &self.bytes[self.holdout.clone()]
    }

    pub fn train_tokens(&self) -> Vec<usize> {
        tokenize(self.train_bytes())
    }

    pub fn holdout_tokens(&self) -> Vec<usize> {
        tokenize(self.holdout_bytes())
    }
}

/// Calibration sequences drawn from the train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Start offset of every sample within the corpus.
    pub offsets: Vec<usize>,
    pub tokens: Tokens,
}

impl CalibrationSet {
    /// Total number of calibration tokens.
    pub fn total_tokens(&self) -> usize {
        self.n_samples * self.seq_len
    }

    /// Byte range of sample `i` within the corpus.
    pub fn sample_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i] + self.seq_len
    }
}

/// Draws `n_samples` windows of `seq_len` tokens with uniformly random start
/// offsets inside the train split.
pub fn sample_calibration(
    corpus: &Corpus,
    n_samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    let train = corpus.train_range();
    let needed = n_samples * seq_len;
    if n_samples == 0 || seq_len == 0 || train.len() < needed || train.len() < seq_len {
        return Err(Error::CorpusTooSmall {
            needed: needed.max(1),
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_start = train.end - seq_len;
    let offsets: Vec<usize> = (0..n_samples)
        .map(|_| rng.gen_range(train.start..=last_start))
        .collect();
    let ids = offsets
        .iter()
        .flat_map(|&o| corpus.bytes[o..o + seq_len].iter().map(|&b| usize::from(b)))
        .collect();
    Ok(CalibrationSet {
        n_samples,
        seq_len,
        seed,
        offsets,
        tokens: Tokens::new(n_samples, seq_len, ids)?,
    })
}
