//! Synthetic Zipfian corpora with learnable local structure.
//!
//! Each document is a first-order Markov chain over `num_words` word types.
//! The next word is drawn from the current word's small successor table with
//! probability `context_weight`, and from a Zipf–Mandelbrot unigram law
//! otherwise. Successor tables are themselves sampled from the base unigram
//! law, so the stationary word frequencies stay close to Zipfian.
//!
//! A frequency-shifted variant keeps the successor tables of the base corpus
//! but permutes which words are frequent in the unigram component, giving a
//! "same language, different domain" corpus for fine-tuning experiments.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub num_words: usize,
    pub zipf_exponent: f64,
    pub zipf_offset: f64,
    pub num_documents: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub successors_per_word: usize,
    pub context_weight: f64,
    pub seed: u64,
    /// Fraction of word types whose unigram ranks are shuffled among
    /// themselves. `0.0` reproduces the base corpus law.
    pub frequency_shift: f64,
    pub shift_seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            num_words: 1996,
            zipf_exponent: 1.1,
            zipf_offset: 2.7,
            num_documents: 1000,
            min_doc_len: 16,
            max_doc_len: 48,
            successors_per_word: 6,
            context_weight: 0.6,
            seed: 0,
            frequency_shift: 0.0,
            shift_seed: 1,
        }
    }
}

impl SyntheticCorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.num_words < 2 {
            return Err(Error::invalid("num_words must be at least 2"));
        }
        if self.min_doc_len == 0 || self.max_doc_len < self.min_doc_len {
            return Err(Error::invalid("need 1 <= min_doc_len <= max_doc_len"));
        }
        if self.successors_per_word == 0 {
            return Err(Error::invalid("successors_per_word must be positive"));
        }
        if !(0.0..=1.0).contains(&self.context_weight) || !(0.0..=1.0).contains(&self.frequency_shift) {
            return Err(Error::invalid("context_weight and frequency_shift must lie in [0, 1]"));
        }
        if !(self.zipf_exponent > 0.0) || !(self.zipf_offset >= 0.0) {
            return Err(Error::invalid("zipf parameters must be positive"));
        }
        Ok(())
    }
}

/// Surface form of word type `i`.
pub fn word_form(i: usize) -> String {
    format!("w{i:04}")
}

fn zipf_weights(cfg: &SyntheticCorpusConfig) -> Vec<f64> {
    (0..cfg.num_words)
        .map(|r| (r as f64 + 1.0 + cfg.zipf_offset).powf(-cfg.zipf_exponent))
        .collect()
}

/// Unigram weights of the (possibly shifted) corpus law, indexed by word type.
pub fn unigram_weights(cfg: &SyntheticCorpusConfig) -> Vec<f64> {
    let base = zipf_weights(cfg);
    if cfg.frequency_shift == 0.0 {
        return base;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shift_seed);
    let mut chosen: Vec<usize> = (0..cfg.num_words).collect();
    chosen.shuffle(&mut rng);
    let k = ((cfg.num_words as f64) * cfg.frequency_shift).round() as usize;
    let mut chosen = chosen[..k].to_vec();
    chosen.sort_unstable();
    let mut targets = chosen.clone();
    targets.shuffle(&mut rng);
    let mut shifted = base.clone();
    for (&from, &to) in chosen.iter().zip(&targets) {
        shifted[to] = base[from];
    }
    shifted
}

/// Generate documents, one whitespace-joined string per document.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let base = zipf_weights(cfg);
    let base_dist = WeightedIndex::new(&base).map_err(|e| Error::invalid(e.to_string()))?;

    // Successor tables depend only on the base seed, so shifted corpora share them.
    let mut table_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5u64.rotate_left(40));
    let successors: Vec<Vec<usize>> = (0..cfg.num_words)
        .map(|_| {
            (0..cfg.successors_per_word)
                .map(|_| base_dist.sample(&mut table_rng))
                .collect()
        })
        .collect();

    let unigram = unigram_weights(cfg);
    let unigram_dist = WeightedIndex::new(&unigram).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + (cfg.frequency_shift * 1e6) as u64 + (cfg.shift_seed << 24));

    let mut docs = Vec::with_capacity(cfg.num_documents);
    for _ in 0..cfg.num_documents {
        let len = rng.random_range(cfg.min_doc_len..=cfg.max_doc_len);
        let mut words = Vec::with_capacity(len);
        let mut cur = unigram_dist.sample(&mut rng);
        words.push(word_form(cur));
        for _ in 1..len {
            cur = if rng.random::<f64>() < cfg.context_weight {
                let table = &successors[cur];
                table[rng.random_range(0..table.len())]
            } else {
                unigram_dist.sample(&mut rng)
            };
            words.push(word_form(cur));
        }
        docs.push(words.join(" "));
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::spearman;
    use std::collections::HashMap;

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            num_words: 200,
            num_documents: 400,
            ..Default::default()
        }
    }

    fn counts(docs: &[String], n: usize) -> Vec<f64> {
        let mut m: HashMap<&str, usize> = HashMap::new();
        for d in docs {
            for w in d.split_whitespace() {
                *m.entry(w).or_default() += 1;
            }
        }
        (0..n)
            .map(|i| *m.get(word_form(i).as_str()).unwrap_or(&0) as f64)
            .collect()
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = SyntheticCorpusConfig {
            seed: 9,
            ..small()
        };
        assert_ne!(generate_corpus(&small()).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn document_lengths_in_range() {
        let cfg = small();
        for d in generate_corpus(&cfg).unwrap() {
            let n = d.split_whitespace().count();
            assert!((cfg.min_doc_len..=cfg.max_doc_len).contains(&n));
        }
    }

    #[test]
    fn frequencies_follow_the_unigram_law() {
        let cfg = small();
        let docs = generate_corpus(&cfg).unwrap();
        let c = counts(&docs, cfg.num_words);
        let rho = spearman(&c, &unigram_weights(&cfg)).unwrap();
        assert!(rho > 0.8, "rho {rho}");
    }

    #[test]
    fn shift_changes_frequency_ranking() {
        let cfg = small();
        let shifted = SyntheticCorpusConfig {
            frequency_shift: 0.5,
            ..small()
        };
        let w0 = unigram_weights(&cfg);
        let w1 = unigram_weights(&shifted);
        let mut sorted0 = w0.clone();
        let mut sorted1 = w1.clone();
        sorted0.sort_by(f64::total_cmp);
        sorted1.sort_by(f64::total_cmp);
        assert_eq!(sorted0, sorted1);
        let rho = spearman(&w0, &w1).unwrap();
        assert!(rho < 0.9 && rho > 0.0, "rho {rho}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SyntheticCorpusConfig {
            min_doc_len: 5,
            max_doc_len: 2,
            ..small()
        };
        assert!(generate_corpus(&cfg).is_err());
    }
}
