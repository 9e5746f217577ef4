use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};

/// Masked-LM corruption rates. Selected positions become MASK with
/// probability `mask_frac`, a random ordinary token with `random_frac`, and
/// keep their original token otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingRates {
    pub select_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
}

impl Default for MaskingRates {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

impl MaskingRates {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.select_rate) || !in_unit(self.mask_frac) || !in_unit(self.random_frac) {
            return Err(Error::invalid("masking rates must lie in [0, 1]"));
        }
        if self.mask_frac + self.random_frac > 1.0 + 1e-12 {
            return Err(Error::invalid("mask_frac + random_frac must not exceed 1"));
        }
        Ok(())
    }
}

/// Corrupt `ids` for masked-LM prediction. Returns the corrupted sequence and
/// the selected (target) positions in ascending order. PAD positions are
/// never selected.
pub fn mask_corrupt<R: Rng + ?Sized>(
    ids: &[usize],
    vocab: &Vocab,
    rates: &MaskingRates,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    rates.validate()?;
    let regular = vocab.regular_range();
    if rates.random_frac > 0.0 && regular.is_none() {
        return Err(Error::invalid(
            "random replacement needs ordinary tokens with specials packed first",
        ));
    }
    let mut corrupted = ids.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if id == vocab.pad() {
            continue;
        }
        if rng.random::<f64>() >= rates.select_rate {
            continue;
        }
        targets.push(pos);
        let action: f64 = rng.random();
        if action < rates.mask_frac {
            corrupted[pos] = vocab.mask();
        } else if action < rates.mask_frac + rates.random_frac {
            let range = regular.clone().expect("checked above");
            corrupted[pos] = rng.random_range(range);
        }
    }
    Ok((corrupted, targets))
}
