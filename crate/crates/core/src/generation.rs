//! Auto-regressive sampling from a causal model with `b_LN` scaled by λ.
//!
//! Each prompt gets its own generator, seeded with `seed` on stream
//! `prompt_index`, so batch and one-at-a-time generation agree exactly.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::InterventionSpec;
use crate::model::{CausalDecoder, ModelParams};
use crate::numeric::{softmax_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    TopK,
    TopP,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::TopK => "top_k",
            Strategy::TopP => "top_p",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "top_k" => Ok(Strategy::TopK),
            "top_p" => Ok(Strategy::TopP),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?} (expected vanilla, top_k or top_p)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub p: f64,
    pub lambda_ln: f64,
    /// Tokens copied from the reference as the prompt.
    pub prompt_len: usize,
    /// Cap on total sequence length, prompt included. The model's
    /// `max_seq_len` caps it further.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopP,
            k: 50,
            p: 0.9,
            lambda_ln: 1.0,
            prompt_len: 10,
            max_len: 1024,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid("p must lie in (0, 1]"));
        }
        if self.prompt_len == 0 {
            return Err(Error::invalid("prompt_len must be at least 1"));
        }
        if self.max_len <= self.prompt_len {
            return Err(Error::invalid("max_len must exceed prompt_len"));
        }
        InterventionSpec::lambda(self.lambda_ln).map(|_| ())
    }

    pub fn intervention(&self) -> Result<InterventionSpec> {
        InterventionSpec::lambda(self.lambda_ln)
    }
}

fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if let Some(i) = dist.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("invalid probability at index {i}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("distribution sums to {total}")));
    }
    Ok(())
}

/// Token ids by descending probability, ties by ascending id.
fn descending_order(dist: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order
}

fn keep_and_renormalize(dist: &[f64], kept: &[usize]) -> Vec<f64> {
    let mass: f64 = kept.iter().map(|&i| dist[i]).sum();
    let mut out = vec![0.0; dist.len()];
    for &i in kept {
        out[i] = dist[i] / mass;
    }
    out
}

/// Restrict `dist` according to `strategy` and renormalize.
///
/// Top-k keeps the `k` most probable tokens. Top-p keeps the shortest
/// prefix of the descending order whose mass reaches `p`, boundary token
/// included. Ties are broken by ascending id.
pub fn filter_distribution(dist: &[f64], strategy: Strategy, k: usize, p: f64) -> Result<Vec<f64>> {
    check_distribution(dist)?;
    match strategy {
        Strategy::Vanilla => Ok(dist.to_vec()),
        Strategy::TopK => {
            if k == 0 {
                return Err(Error::invalid("k must be at least 1"));
            }
            if k >= dist.len() {
                if k > dist.len() {
                    log::warn!("top-k with k = {k} over {} tokens; sampling without a cutoff", dist.len());
                }
                return Ok(dist.to_vec());
            }
            let order = descending_order(dist);
            Ok(keep_and_renormalize(dist, &order[..k]))
        }
        Strategy::TopP => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid("p must lie in (0, 1]"));
            }
            if p >= 1.0 {
                return Ok(dist.to_vec());
            }
            let order = descending_order(dist);
            let mut cum = 0.0;
            let mut end = 0;
            for &i in &order {
                if dist[i] == 0.0 {
                    break;
                }
                cum += dist[i];
                end += 1;
                if cum >= p {
                    break;
                }
            }
            Ok(keep_and_renormalize(dist, &order[..end.max(1)]))
        }
    }
}

/// Draw a token id with the probabilities in `dist` (inverse CDF).
pub fn sample_next<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let total: f64 = dist.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

/// Continue the first `cfg.prompt_len` tokens of `reference` until `eos` is
/// sampled or the sequence reaches `min(cfg.max_len, max_seq_len)` tokens.
/// The returned sequence starts with the prompt and ends with `eos` when
/// generation stopped on it.
pub fn generate<F: Scalar>(
    params: &ModelParams<F>,
    reference: &[usize],
    cfg: &GenerationConfig,
    eos: usize,
    prompt_index: u64,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut decoder = CausalDecoder::new(params)?;
    if reference.len() < cfg.prompt_len {
        return Err(Error::invalid(format!(
            "reference of {} tokens is shorter than prompt_len {}",
            reference.len(),
            cfg.prompt_len
        )));
    }
    let cap = cfg.max_len.min(params.config.max_seq_len);
    if cap <= cfg.prompt_len {
        return Err(Error::invalid(format!(
            "prompt_len {} leaves no room under max_seq_len {}",
            cfg.prompt_len, params.config.max_seq_len
        )));
    }
    let iv = cfg.intervention()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(prompt_index);
    let mut out: Vec<usize> = reference[..cfg.prompt_len].to_vec();
    let mut hidden = None;
    for &t in &out {
        hidden = Some(decoder.push(t)?);
    }
    while let Some(h) = hidden.take() {
        let logits = params
            .head
            .logits(h.view().insert_axis(Axis(0)), params.token_embedding.view(), &iv)?;
        let z: Vec<f64> = logits.row(0).iter().map(|v| v.as_f64()).collect();
        let dist = filter_distribution(&softmax_f64(&z), cfg.strategy, cfg.k, cfg.p)?;
        let next = sample_next(&dist, &mut rng);
        out.push(next);
        if next == eos || out.len() >= cap {
            break;
        }
        hidden = Some(decoder.push(next)?);
    }
    Ok(out)
}

/// [`generate`] for every reference in parallel; output `i` uses stream `i`.
pub fn generate_many<F: Scalar>(
    params: &ModelParams<F>,
    references: &[Vec<usize>],
    cfg: &GenerationConfig,
    eos: usize,
) -> Result<Vec<Vec<usize>>> {
    references
        .par_iter()
        .enumerate()
        .map(|(i, r)| generate(params, r, cfg, eos, i as u64))
        .collect()
}
