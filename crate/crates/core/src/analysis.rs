//! Probes of how the head biases encode word frequency: averaged prediction
//! distributions, KL against the unigram law, rank correlations, direction
//! removal, isotropy and hidden-state orthogonality.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::corpus::{bin_curve, BinnedCurve, PredictionSet, UnigramDistribution};
use crate::error::{Error, Result};
use crate::head::InterventionSpec;
use crate::model::{map_site_logits, site_hidden_states, ModelParams};
use crate::numeric::{softmax_f64, CompensatedSum, CompensatedVec, Scalar};

/// 1-based ranks in ascending order; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("spearman", xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(Error::invalid("spearman needs at least 3 points"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::invalid("spearman input contains NaN"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// `Σ p_i ln(p_i / q_i)` in nats; terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", p.len(), q.len()));
    }
    let mut acc = CompensatedSum::default();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::invalid(format!("invalid probability at index {i}")));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation { index: i, p: pi });
        }
        acc.add(pi * (pi / qi).ln());
    }
    Ok(acc.value())
}

/// Mean of the head's prediction distributions over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSummary {
    pub avg_probs: Vec<f64>,
    pub positions: usize,
}

/// Elementwise mean of distributions with compensated accumulation.
pub fn average_distributions<I, V>(dists: I) -> Result<PredictionSummary>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[f64]>,
{
    let mut acc: Option<CompensatedVec> = None;
    let mut len = 0;
    let mut n = 0;
    for d in dists {
        let d = d.as_ref();
        let a = acc.get_or_insert_with(|| {
            len = d.len();
            CompensatedVec::zeros(d.len())
        });
        if d.len() != len {
            return Err(Error::shape("average_distributions", len, d.len()));
        }
        a.add(d.iter().copied());
        n += 1;
    }
    let acc = acc.ok_or(Error::NoPredictionSites)?;
    Ok(PredictionSummary {
        avg_probs: acc.values().into_iter().map(|s| s / n as f64).collect(),
        positions: n,
    })
}

/// Average prediction distribution of `params` over every site in `set` under `iv`.
pub fn avg_prediction_distribution<F: Scalar>(
    params: &ModelParams<F>,
    set: &PredictionSet,
    iv: &InterventionSpec,
) -> Result<PredictionSummary> {
    let vocab = params.config.vocab_size;
    let parts = map_site_logits(params, set, iv, |logits, _| {
        let mut acc = CompensatedVec::zeros(vocab);
        for row in logits.rows() {
            let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            acc.add(softmax_f64(&z));
        }
        (acc, logits.nrows())
    })?;
    let mut total = CompensatedVec::zeros(vocab);
    let mut n = 0;
    for (acc, rows) in &parts {
        total.merge(acc);
        n += rows;
    }
    Ok(PredictionSummary {
        avg_probs: total.values().into_iter().map(|s| s / n as f64).collect(),
        positions: n,
    })
}

/// `⟨b, w_i⟩` for every row `w_i` of the embedding matrix.
pub fn bias_embedding_products<F: Scalar>(b: ArrayView1<F>, emb: ArrayView2<F>) -> Result<Vec<f64>> {
    if b.len() != emb.ncols() {
        return Err(Error::shape("bias_embedding_products", emb.ncols(), b.len()));
    }
    Ok(emb
        .rows()
        .into_iter()
        .map(|w| w.iter().zip(b.iter()).map(|(x, y)| x.as_f64() * y.as_f64()).sum())
        .collect())
}

/// Project the direction of `b` out of every row: `w_i - ⟨w_i, b̂⟩ b̂`.
pub fn remove_direction<F: Scalar>(emb: ArrayView2<F>, b: ArrayView1<F>) -> Result<Array2<F>> {
    if b.len() != emb.ncols() {
        return Err(Error::shape("remove_direction", emb.ncols(), b.len()));
    }
    let norm = b.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    let unit: Vec<f64> = b.iter().map(|v| v.as_f64() / norm).collect();
    let mut out = emb.to_owned();
    for mut row in out.rows_mut() {
        let proj: f64 = row.iter().zip(&unit).map(|(w, u)| w.as_f64() * u).sum();
        for (w, u) in row.iter_mut().zip(&unit) {
            *w = F::lit(w.as_f64() - proj * u);
        }
    }
    Ok(out)
}

/// Mean pairwise cosine `(1/n²) Σ_i Σ_j cos(v_i, v_j)` over the rows,
/// self-pairs included. Equals `‖Σ_i v̂_i‖² / n²`.
pub fn isotropy<F: Scalar>(vectors: ArrayView2<F>) -> Result<f64> {
    let n = vectors.nrows();
    if n == 0 {
        return Err(Error::invalid("isotropy of an empty set"));
    }
    let mut sum = vec![CompensatedSum::default(); vectors.ncols()];
    for (i, row) in vectors.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::ZeroVector { index: i });
        }
        for (acc, v) in sum.iter_mut().zip(row.iter()) {
            acc.add(v.as_f64() / norm);
        }
    }
    let sq: f64 = sum.iter().map(|s| s.value() * s.value()).sum();
    Ok((sq / (n as f64 * n as f64)).clamp(-1.0, 1.0))
}

/// Mean `|cos(h, b)|` over the rows `h` of `states`.
pub fn mean_abs_cosine<F: Scalar>(states: ArrayView2<F>, b: ArrayView1<F>) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::NoPredictionSites);
    }
    if b.len() != states.ncols() {
        return Err(Error::shape("mean_abs_cosine", states.ncols(), b.len()));
    }
    let bn = b.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if !(bn > 0.0) {
        return Err(Error::ZeroDirection);
    }
    let mut acc = CompensatedSum::default();
    for (i, h) in states.rows().into_iter().enumerate() {
        let hn = h.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(hn > 0.0) {
            return Err(Error::ZeroVector { index: i });
        }
        let dot: f64 = h.iter().zip(b.iter()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        acc.add((dot / (hn * bn)).abs().min(1.0));
    }
    Ok(acc.value() / states.nrows() as f64)
}

/// Mean `|cos(h, b)|` where `h` is the head-LayerNorm state just before
/// `b_LN` is added, over every site of `set`.
pub fn hidden_bias_orthogonality<F: Scalar>(
    params: &ModelParams<F>,
    set: &PredictionSet,
    b: ArrayView1<F>,
    iv: &InterventionSpec,
) -> Result<f64> {
    let sites = site_hidden_states(params, set)?;
    let states = params.head.pre_bias_states(sites.hidden.view(), iv)?;
    mean_abs_cosine(states.view(), b)
}

/// Spearman ρ between per-token values and log corpus frequency. Tokens with
/// zero count are excluded and reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrequencyCorrelation {
    pub rho: f64,
    pub tokens: usize,
    pub excluded_zero_frequency: usize,
}

pub fn frequency_correlation(values: &[f64], unigram: &UnigramDistribution) -> Result<FrequencyCorrelation> {
    if values.len() != unigram.len() {
        return Err(Error::shape("frequency_correlation", unigram.len(), values.len()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = values
        .iter()
        .zip(&unigram.counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&v, &c)| (v, (c as f64).ln()))
        .unzip();
    Ok(FrequencyCorrelation {
        rho: spearman(&xs, &ys)?,
        tokens: xs.len(),
        excluded_zero_frequency: values.len() - xs.len(),
    })
}

/// KL of an averaged prediction distribution against the unigram and uniform laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlReport {
    pub kl_unigram: f64,
    pub kl_uniform: f64,
    /// Whether add-one smoothing was applied to the unigram for support.
    pub unigram_smoothed: bool,
}

pub fn kl_report(avg_probs: &[f64], unigram: &UnigramDistribution) -> Result<KlReport> {
    let smoothed = unigram.zero_count_items() > 0;
    let q = if smoothed {
        unigram.add_one_smoothed()
    } else {
        unigram.clone()
    };
    let n = avg_probs.len();
    let uniform = vec![1.0 / n as f64; n];
    Ok(KlReport {
        kl_unigram: kl_divergence(avg_probs, &q.probs)?,
        kl_uniform: kl_divergence(avg_probs, &uniform)?,
        unigram_smoothed: smoothed,
    })
}

/// Averaged prediction probabilities binned by corpus frequency, one entry per token type.
pub fn frequency_curve(unigram: &UnigramDistribution, avg_probs: &[f64], num_bins: usize) -> Result<BinnedCurve> {
    bin_curve(&unigram.probs, avg_probs, num_bins)
}

/// How two curves over the same bins compare in the rarest and most frequent terciles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TercileComparison {
    pub bins_per_tercile: usize,
    /// Low-frequency bins where `a` lies above `b`.
    pub low_above: usize,
    /// High-frequency bins where `a` lies below `b`.
    pub high_below: usize,
}

impl TercileComparison {
    pub fn low_fraction(&self) -> f64 {
        self.low_above as f64 / self.bins_per_tercile as f64
    }

    pub fn high_fraction(&self) -> f64 {
        self.high_below as f64 / self.bins_per_tercile as f64
    }
}

/// Compare geometric means of curve `a` against `b` bin by bin. Both must
/// have been binned from the same frequencies.
pub fn compare_terciles(a: &BinnedCurve, b: &BinnedCurve) -> Result<TercileComparison> {
    if a.edges != b.edges || a.bins.len() != b.bins.len() || a.bins.iter().zip(&b.bins).any(|(x, y)| x.index != y.index) {
        return Err(Error::invalid("curves were binned differently"));
    }
    let n = a.bins.len();
    let k = n / 3;
    if k == 0 {
        return Err(Error::invalid(format!("need at least 3 non-empty bins, found {n}")));
    }
    let low_above = (0..k).filter(|&i| a.bins[i].geo_mean > b.bins[i].geo_mean).count();
    let high_below = (n - k..n).filter(|&i| a.bins[i].geo_mean < b.bins[i].geo_mean).count();
    Ok(TercileComparison {
        bins_per_tercile: k,
        low_above,
        high_below,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryReport {
    /// `⟨b_LN, w_i⟩` per token id.
    pub products: Vec<f64>,
    pub spearman_vs_logfreq: f64,
    pub excluded_zero_frequency: usize,
    pub isotropy_before: f64,
    pub isotropy_after: f64,
    pub hidden_orthogonality: f64,
}

/// All geometric probes of `b_LN` for one model.
pub fn geometry_report<F: Scalar>(
    params: &ModelParams<F>,
    set: &PredictionSet,
    unigram: &UnigramDistribution,
) -> Result<GeometryReport> {
    let emb = params.token_embedding.view();
    let b = params.head.b_ln.view();
    let products = bias_embedding_products(b, emb)?;
    let corr = frequency_correlation(&products, unigram)?;
    let removed = remove_direction(emb, b)?;
    Ok(GeometryReport {
        spearman_vs_logfreq: corr.rho,
        excluded_zero_frequency: corr.excluded_zero_frequency,
        isotropy_before: isotropy(emb)?,
        isotropy_after: isotropy(removed.view())?,
        hidden_orthogonality: hidden_bias_orthogonality(params, set, b, &InterventionSpec::identity())?,
        products,
    })
}

/// Rank correlations of `⟨b_LN, w_i⟩` with log frequency, before and after
/// fine-tuning, under the original and the fine-tuning corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftReport {
    pub rho_old_before: f64,
    pub rho_old_after: f64,
    pub rho_new_before: f64,
    pub rho_new_after: f64,
}

pub fn finetune_shift_report<F: Scalar>(
    before: &ModelParams<F>,
    after: &ModelParams<F>,
    unigram_pretrain: &UnigramDistribution,
    unigram_finetune: &UnigramDistribution,
) -> Result<ShiftReport> {
    let v = before.config.vocab_size;
    if after.config.vocab_size != v || unigram_pretrain.len() != v || unigram_finetune.len() != v {
        return Err(Error::CheckpointMismatch("models and corpora do not share a vocabulary".into()));
    }
    let pb = bias_embedding_products(before.head.b_ln.view(), before.token_embedding.view())?;
    let pa = bias_embedding_products(after.head.b_ln.view(), after.token_embedding.view())?;
    Ok(ShiftReport {
        rho_old_before: frequency_correlation(&pb, unigram_pretrain)?.rho,
        rho_old_after: frequency_correlation(&pa, unigram_pretrain)?.rho,
        rho_new_before: frequency_correlation(&pb, unigram_finetune)?.rho,
        rho_new_after: frequency_correlation(&pa, unigram_finetune)?.rho,
    })
}
