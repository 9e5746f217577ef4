use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::forward::{forward_body, PaddedBatch};
use super::ModelParams;
use crate::corpus::{PredictionSet, SiteSequence};
use crate::error::{Error, Result};
use crate::head::InterventionSpec;
use crate::numeric::{log_softmax_f64, CompensatedSum, Scalar};

/// Sequences per forward batch during evaluation.
const EVAL_CHUNK: usize = 32;

/// Last-layer hidden states at prediction sites, in site order.
#[derive(Debug, Clone)]
pub struct SiteHidden<F> {
    pub hidden: Array2<F>,
    pub targets: Vec<usize>,
}

fn chunk_hidden<F: Scalar>(params: &ModelParams<F>, chunk: &[SiteSequence]) -> Result<(Array2<F>, Vec<usize>)> {
    let inputs: Vec<&[usize]> = chunk.iter().map(|s| s.input.as_slice()).collect();
    let padded = PaddedBatch::new(&inputs, &params.config)?;
    let body = forward_body(params, &padded, false);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, seq) in chunk.iter().enumerate() {
        for &(t, target) in &seq.sites {
            rows.push(b * padded.seq + t);
            targets.push(target);
        }
    }
    Ok((body.hidden.select(Axis(0), &rows), targets))
}

/// Apply `f` to the head logits of every chunk of sites, in order.
/// Chunks run in parallel; results are returned in dataset order.
pub(crate) fn map_site_logits<F, T, G>(
    params: &ModelParams<F>,
    set: &PredictionSet,
    iv: &InterventionSpec,
    f: G,
) -> Result<Vec<T>>
where
    F: Scalar,
    T: Send,
    G: Fn(ArrayView2<F>, &[usize]) -> T + Sync,
{
    if set.is_empty() {
        return Err(Error::NoPredictionSites);
    }
    set.sequences
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (hidden, targets) = chunk_hidden(params, chunk)?;
            if targets.is_empty() {
                return Ok(None);
            }
            let logits = params.head.logits(hidden.view(), params.token_embedding.view(), iv)?;
            Ok(Some(f(logits.view(), &targets)))
        })
        .collect::<Result<Vec<Option<T>>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Hidden states at every prediction site of `set`.
pub fn site_hidden_states<F: Scalar>(params: &ModelParams<F>, set: &PredictionSet) -> Result<SiteHidden<F>> {
    if set.is_empty() {
        return Err(Error::NoPredictionSites);
    }
    let parts = set
        .sequences
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| chunk_hidden(params, chunk))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<ArrayView2<F>> = parts.iter().map(|(h, _)| h.view()).collect();
    let hidden = concatenate(Axis(0), &views).expect("equal widths");
    let targets = parts.into_iter().flat_map(|(_, t)| t).collect();
    Ok(SiteHidden { hidden, targets })
}

/// `ln p(target)` at every site under `iv`, computed in `f64`.
pub fn site_log_probs<F: Scalar>(
    params: &ModelParams<F>,
    set: &PredictionSet,
    iv: &InterventionSpec,
) -> Result<Vec<f64>> {
    let parts = map_site_logits(params, set, iv, |logits, targets| {
        logits
            .rows()
            .into_iter()
            .zip(targets)
            .map(|(row, &t)| {
                let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                log_softmax_f64(&z)[t]
            })
            .collect::<Vec<f64>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Mean of `-ln p(target)` over all sites. Infinite when any observed
/// target has zero probability.
pub fn mean_cross_entropy<F: Scalar>(
    params: &ModelParams<F>,
    set: &PredictionSet,
    iv: &InterventionSpec,
) -> Result<f64> {
    let logps = site_log_probs(params, set, iv)?;
    let mut acc = CompensatedSum::default();
    for &lp in &logps {
        if lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        acc.add(-lp);
    }
    Ok(acc.value() / logps.len() as f64)
}

/// Mean last-layer hidden state of each sequence (over all its positions), in `f64`.
pub fn mean_hidden_states<F: Scalar>(params: &ModelParams<F>, docs: &[Vec<usize>]) -> Result<Array2<f64>> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max = params.config.max_seq_len;
    let d = params.config.d_model;
    let parts = docs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let inputs: Vec<&[usize]> = chunk.iter().map(|doc| &doc[..doc.len().min(max)]).collect();
            let padded = PaddedBatch::new(&inputs, &params.config)?;
            let body = forward_body(params, &padded, false);
            let mut out = Array2::<f64>::zeros((chunk.len(), d));
            for (b, &len) in padded.lengths.iter().enumerate() {
                let mut row = out.row_mut(b);
                for t in 0..len {
                    let h = body.hidden.row(b * padded.seq + t);
                    row.zip_mut_with(&h, |acc, &v| *acc += v.as_f64());
                }
                row.mapv_inplace(|v| v / len as f64);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}
