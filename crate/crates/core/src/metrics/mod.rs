//! Diversity and quality scores for generated text.

mod embdiv;

use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;

use serde::{Serialize, Serializer};

use crate::corpus::{PredictionSet, UnigramDistribution};
use crate::error::{Error, Result};
use crate::generation::Strategy;
use crate::head::InterventionSpec;
use crate::model::{mean_cross_entropy, ModelParams, Variant};
use crate::numeric::{CompensatedSum, Scalar};

pub use embdiv::{embdiv_quality, histogram_score, jensen_shannon, kmeans, KMeans, KMEANS_MAX_ITER};

/// Whitespace tokens of a generated or reference text.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Unique n-grams over total n-gram occurrences, pooled across all texts.
pub fn distinct_n<W: Hash + Eq, T: AsRef<[W]>>(texts: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut unique: HashSet<&[W]> = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        for gram in t.as_ref().windows(n) {
            unique.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoNgrams { n });
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Distinct-1 through Distinct-4 and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiversityScores {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d_mean: f64,
}

pub fn diversity_scores<W: Hash + Eq, T: AsRef<[W]>>(texts: &[T]) -> Result<DiversityScores> {
    let d = [
        distinct_n(texts, 1)?,
        distinct_n(texts, 2)?,
        distinct_n(texts, 3)?,
        distinct_n(texts, 4)?,
    ];
    Ok(DiversityScores {
        d1: d[0],
        d2: d[1],
        d3: d[2],
        d4: d[3],
        d_mean: d.iter().sum::<f64>() / 4.0,
    })
}

/// `D = (D_1 + D_2 + D_3 + D_4) / 4`.
pub fn ngram_diversity<W: Hash + Eq, T: AsRef<[W]>>(texts: &[T]) -> Result<f64> {
    Ok(diversity_scores(texts)?.d_mean)
}

/// Perplexity, with an explicit infinite value for zero-probability targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perplexity {
    Finite(f64),
    Infinite,
}

impl Perplexity {
    pub fn from_cross_entropy(ce: f64) -> Self {
        let v = ce.exp();
        if v.is_finite() {
            Perplexity::Finite(v)
        } else {
            Perplexity::Infinite
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Perplexity::Finite(v) => v,
            Perplexity::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Perplexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perplexity::Finite(v) => write!(f, "{v}"),
            Perplexity::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Perplexity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Perplexity::Finite(v) => s.serialize_f64(*v),
            Perplexity::Infinite => s.serialize_str("inf"),
        }
    }
}

/// Perplexity from per-position natural-log probabilities of the observed tokens.
pub fn perplexity_from_log_probs<I: IntoIterator<Item = f64>>(log_probs: I) -> Result<Perplexity> {
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for lp in log_probs {
        if lp == f64::NEG_INFINITY {
            return Ok(Perplexity::Infinite);
        }
        acc.add(-lp);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoPredictionSites);
    }
    Ok(Perplexity::from_cross_entropy(acc.value() / n as f64))
}

/// `exp` of the mean negative log-probability of every observed site under `iv`.
pub fn perplexity<F: Scalar>(params: &ModelParams<F>, set: &PredictionSet, iv: &InterventionSpec) -> Result<Perplexity> {
    if params.config.variant != Variant::Causal {
        return Err(Error::VariantMismatch {
            expected: "causal",
            found: params.config.variant.name(),
        });
    }
    Ok(Perplexity::from_cross_entropy(mean_cross_entropy(params, set, iv)?))
}

/// Mean corpus-frequency rank (1 = most frequent, ties averaged) of the
/// tokens generated after each `prompt_len`-token prompt.
pub fn mean_frequency_rank(generated: &[Vec<usize>], prompt_len: usize, unigram: &UnigramDistribution) -> Result<f64> {
    let ranks = unigram.frequency_ranks();
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for seq in generated {
        for &id in seq.iter().skip(prompt_len) {
            let r = ranks.get(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: ranks.len(),
            })?;
            acc.add(*r);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoTokens);
    }
    Ok(acc.value() / n as f64)
}

/// Scores for one (λ, strategy) cell of a generation sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub lambda_ln: f64,
    pub strategy: Strategy,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d_mean: f64,
    pub embdiv: f64,
    pub ppl: Perplexity,
    pub mean_frequency_rank: f64,
    pub num_texts: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn distinct_examples() {
        let t = [tokenize("a b a b")];
        assert_eq!(distinct_n(&t, 1).unwrap(), 0.5);
        assert!((distinct_n(&t, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[tokenize("a b c d")], 1).unwrap(), 1.0);
        assert!((ngram_diversity(&t).unwrap() - 0.7917).abs() < 1e-4);
        assert!(matches!(distinct_n(&[tokenize("a b")], 3), Err(Error::NoNgrams { n: 3 })));
    }

    #[test]
    fn repetitive_text_closed_form() {
        let n = 12;
        let t = [vec!["x"; n]];
        let s = diversity_scores(&t).unwrap();
        let expected: Vec<f64> = (1..=4).map(|k| 1.0 / (n - k + 1) as f64).collect();
        assert!((s.d1 - expected[0]).abs() < 1e-15);
        assert!((s.d4 - expected[3]).abs() < 1e-15);
        assert!((s.d_mean - expected.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn ngrams_do_not_cross_documents() {
        let t = [tokenize("a b"), tokenize("c d")];
        assert_eq!(distinct_n(&t, 2).unwrap(), 1.0);
        assert_eq!(distinct_n(&t, 3).ok(), None);
    }

    #[test]
    fn perplexity_oracles() {
        let uniform = perplexity_from_log_probs(vec![(0.25f64).ln(); 7]).unwrap();
        assert!((uniform.value() - 4.0).abs() < 1e-12);
        assert_eq!(perplexity_from_log_probs(vec![0.0; 5]).unwrap(), Perplexity::Finite(1.0));
        assert_eq!(perplexity_from_log_probs(vec![-1.0, f64::NEG_INFINITY]).unwrap(), Perplexity::Infinite);
        assert_eq!(serde_json::to_string(&Perplexity::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Perplexity::Finite(2.5)).unwrap(), "2.5");
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let c = ModelConfig {
            variant: Variant::Causal,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            max_seq_len: 8,
            vocab_size: 4,
            ln_epsilon: 1e-5,
        };
        let mut m = ModelParams::<f64>::init(&c, 0).unwrap();
        m.token_embedding.fill(0.0);
        let set = PredictionSet::causal(&[vec![0, 1, 2, 3, 1], vec![3, 3, 2]], 8);
        let ppl = perplexity(&m, &set, &InterventionSpec::identity()).unwrap();
        assert!((ppl.value() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn frequency_rank_skips_prompt() {
        let u = UnigramDistribution::from_counts(vec![10, 5, 5, 1]).unwrap();
        // ranks: id0 = 1, ids 1 and 2 share 2.5, id3 = 4
        let r = mean_frequency_rank(&[vec![3, 3, 0, 1], vec![3, 2]], 1, &u).unwrap();
        assert!((r - (4.0 + 1.0 + 2.5 + 2.5) / 4.0).abs() < 1e-12);
        assert!(mean_frequency_rank(&[vec![1]], 1, &u).is_err());
    }

    proptest! {
        #[test]
        fn distinct_is_permutation_invariant_and_bounded(
            docs in prop::collection::vec(prop::collection::vec(0u8..5, 4..12), 1..6),
            n in 1usize..5,
        ) {
            let mut rev = docs.clone();
            rev.reverse();
            let a = distinct_n(&docs, n).unwrap();
            prop_assert_eq!(a, distinct_n(&rev, n).unwrap());
            prop_assert!(a > 0.0 && a <= 1.0);
        }
    }
}
