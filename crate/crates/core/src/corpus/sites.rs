use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mask_corrupt, MaskingRates, Vocab};
use crate::error::Result;

/// One model input together with the positions whose predictions are scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSequence {
    pub input: Vec<usize>,
    /// `(position, target id)` pairs.
    pub sites: Vec<(usize, usize)>,
}

/// Evaluation data: sequences plus the prediction sites inside them.
///
/// Causal sets predict the second and subsequent tokens of each document;
/// masked sets predict the originals at corrupted positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionSet {
    pub sequences: Vec<SiteSequence>,
}

impl PredictionSet {
    /// Next-token sites over documents truncated to their first `max_len` tokens.
    pub fn causal(docs: &[Vec<usize>], max_len: usize) -> Self {
        let sequences = docs
            .iter()
            .filter_map(|doc| {
                let input: Vec<usize> = doc.iter().copied().take(max_len).collect();
                if input.len() < 2 {
                    return None;
                }
                let sites = (0..input.len() - 1).map(|t| (t, input[t + 1])).collect();
                Some(SiteSequence { input, sites })
            })
            .collect();
        Self { sequences }
    }

    /// Masked-LM sites. Document `i` is corrupted with a generator on stream
    /// `i` of `seed`, so the result does not depend on iteration order.
    pub fn masked(
        docs: &[Vec<usize>],
        max_len: usize,
        vocab: &Vocab,
        rates: &MaskingRates,
        seed: u64,
    ) -> Result<Self> {
        let mut sequences = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let truncated: Vec<usize> = doc.iter().copied().take(max_len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (input, targets) = mask_corrupt(&truncated, vocab, rates, &mut rng)?;
            if targets.is_empty() {
                continue;
            }
            let sites = targets.into_iter().map(|p| (p, truncated[p])).collect();
            sequences.push(SiteSequence { input, sites });
        }
        Ok(Self { sequences })
    }

    pub fn num_sites(&self) -> usize {
        self.sequences.iter().map(|s| s.sites.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_sites() == 0
    }

    /// All target ids in site order.
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.sequences
            .iter()
            .flat_map(|s| s.sites.iter().map(|&(_, t)| t))
    }

    /// This set repeated `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        Self {
            sequences: (0..times).flat_map(|_| self.sequences.iter().cloned()).collect(),
        }
    }
}
