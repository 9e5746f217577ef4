//! Corpus ingestion: whitespace vocabulary, unigram statistics, masked-LM
//! corruption, frequency binning and prediction-site datasets.
//!
//! Tokens are whitespace-separated surface forms, so token frequency and word
//! frequency coincide.

mod binning;
mod masking;
mod sites;
pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use binning::{bin_curve, bin_curve_with_edges, BinnedCurve, CurveBin};
pub use masking::{mask_corrupt, MaskingRates};
pub use sites::{PredictionSet, SiteSequence};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const MASK_TOKEN: &str = "<mask>";

const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN, MASK_TOKEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub eos: usize,
    pub mask: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: SpecialIds,
}

/// Ordered token inventory. Special tokens occupy ids `0..4`, followed by
/// corpus words in descending count order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    specials: SpecialIds,
    index: HashMap<String, usize>,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        let mut index = HashMap::with_capacity(file.tokens.len());
        for (id, tok) in file.tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate token {tok:?} in vocabulary")));
            }
        }
        let s = file.specials;
        let n = file.tokens.len();
        let mut ids = [s.pad, s.unk, s.eos, s.mask];
        if ids.iter().any(|&id| id >= n) {
            return Err(Error::invalid("special id outside vocabulary"));
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("special ids must be distinct"));
        }
        Ok(Vocab {
            tokens: file.tokens,
            specials: file.specials,
            index,
        })
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.tokens,
            specials: v.specials,
        }
    }
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab {
            tokens,
            specials: SpecialIds {
                pad: 0,
                unk: 1,
                eos: 2,
                mask: 3,
            },
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn pad(&self) -> usize {
        self.specials.pad
    }

    pub fn unk(&self) -> usize {
        self.specials.unk
    }

    pub fn eos(&self) -> usize {
        self.specials.eos
    }

    pub fn mask(&self) -> usize {
        self.specials.mask
    }

    pub fn is_special(&self, id: usize) -> bool {
        let s = self.specials;
        id == s.pad || id == s.unk || id == s.eos || id == s.mask
    }

    /// Ids of ordinary (non-special) tokens.
    pub fn regular_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&id| !self.is_special(id))
    }

    /// Contiguous id range of ordinary tokens, when specials are packed first.
    pub(crate) fn regular_range(&self) -> Option<Range<usize>> {
        let s = self.specials;
        let mut ids = [s.pad, s.unk, s.eos, s.mask];
        ids.sort_unstable();
        (ids == [0, 1, 2, 3] && self.len() > 4).then_some(4..self.len())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whitespace-split `text` and map words to ids, out-of-vocabulary words to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.specials.unk))
            .collect()
    }

    /// Encode one document and append EOS.
    pub fn encode_document(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.push(self.specials.eos);
        ids
    }

    /// Join token strings with single spaces. Unknown ids are rendered as UNK.
    pub fn decode(&self, ids: &[usize]) -> String {
        let unk = &self.tokens[self.specials.unk];
        ids.iter()
            .map(|&id| self.tokens.get(id).unwrap_or(unk).as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Decode without PAD and EOS markers, for writing generated text.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let kept: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&id| id != self.specials.pad && id != self.specials.eos)
            .collect();
        self.decode(&kept)
    }

    /// SHA-256 of the canonical JSON form, used to pin checkpoints to a tokenizer.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&VocabFile::from(self.clone())).expect("vocab serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Build a vocabulary of the `max_vocab - 4` most frequent words plus the four
/// special tokens. Count ties are broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], max_vocab: usize) -> Result<Vocab> {
    if max_vocab < 5 {
        return Err(Error::invalid(format!(
            "max_vocab must be at least 5, got {max_vocab}"
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for text in texts {
        for w in text.as_ref().split_whitespace() {
            if SPECIAL_TOKENS.contains(&w) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_vocab - SPECIAL_TOKENS.len());
    Ok(Vocab::from_words(
        ranked.into_iter().map(|(w, _)| w.to_string()).collect(),
    ))
}

/// Corpus relative frequency of every vocabulary item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramDistribution {
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
    /// Whether add-one smoothing was applied to `probs`.
    pub smoothed: bool,
}

impl UnigramDistribution {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::NoTokens);
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            counts,
            probs,
            smoothed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn zero_count_items(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }

    /// Add-one smoothed copy; `counts` keep the raw values.
    pub fn add_one_smoothed(&self) -> Self {
        let total = self.total() as f64 + self.counts.len() as f64;
        Self {
            counts: self.counts.clone(),
            probs: self.counts.iter().map(|&c| (c as f64 + 1.0) / total).collect(),
            smoothed: true,
        }
    }

    /// Frequency ranks with 1 for the most frequent item; ties share their average rank.
    pub fn frequency_ranks(&self) -> Vec<f64> {
        let neg: Vec<f64> = self.counts.iter().map(|&c| -(c as f64)).collect();
        crate::analysis::average_ranks(&neg)
    }

    pub fn write_csv<W: Write>(&self, vocab: &Vocab, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["token", "id", "count", "prob"])?;
        for (id, (&count, &prob)) in self.counts.iter().zip(&self.probs).enumerate() {
            w.write_record([
                vocab.token(id).unwrap_or(UNK_TOKEN),
                &id.to_string(),
                &count.to_string(),
                &format!("{prob:e}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Count encoded tokens (plus one EOS per document) over the vocabulary.
pub fn count_unigram<S: AsRef<str>>(texts: &[S], vocab: &Vocab) -> Result<UnigramDistribution> {
    let mut counts = vec![0u64; vocab.len()];
    for text in texts {
        for id in vocab.encode_document(text.as_ref()) {
            counts[id] += 1;
        }
    }
    UnigramDistribution::from_counts(counts)
}

/// Documents encoded as id sequences, each terminated by EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub docs: Vec<Vec<usize>>,
}

impl EncodedCorpus {
    pub fn encode<S: AsRef<str>>(texts: &[S], vocab: &Vocab) -> Self {
        Self {
            docs: texts
                .iter()
                .map(|t| vocab.encode_document(t.as_ref()))
                .collect(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Split off the last `held_out` documents.
    pub fn split_tail(&self, held_out: usize) -> (EncodedCorpus, EncodedCorpus) {
        let cut = self.docs.len().saturating_sub(held_out);
        (
            EncodedCorpus {
                docs: self.docs[..cut].to_vec(),
            },
            EncodedCorpus {
                docs: self.docs[cut..].to_vec(),
            },
        )
    }
}

/// Read a corpus file: UTF-8, one document per line, blank lines skipped.
pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
