use ndarray::{s, Array2, Array3, ArrayView2};
#[cfg(test)]
use ndarray::Axis;

use super::{LayerParams, ModelConfig, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::head::{gelu, normalize_rows};
use crate::numeric::Scalar;

/// Variable-length sequences packed row-major into `batch × seq` slots.
/// Slots past a sequence's length hold token 0 and are masked out as keys.
#[derive(Debug, Clone)]
pub(crate) struct PaddedBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq: usize,
}

impl PaddedBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut seq = 0;
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::invalid("empty sequence in batch"));
            }
            if s.len() > config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: config.max_seq_len,
                });
            }
            if let Some(&id) = s.iter().find(|&&id| id >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
            seq = seq.max(s.len());
        }
        let mut ids = vec![0; seqs.len() * seq];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            ids[b * seq..b * seq + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Ok(Self { ids, lengths, seq })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

/// Intermediates of one block needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache<F> {
    pub ln1_xhat: Array2<F>,
    pub ln1_rstd: ndarray::Array1<F>,
    pub ln1_out: Array2<F>,
    pub qkv: Array2<F>,
    /// Attention probabilities per `(batch, head)`, index `b * n_heads + h`.
    pub probs: Vec<Array2<F>>,
    pub attn: Array2<F>,
    pub ln2_xhat: Array2<F>,
    pub ln2_rstd: ndarray::Array1<F>,
    pub ln2_out: Array2<F>,
    pub ff_pre: Array2<F>,
    pub ff_act: Array2<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct BodyOutput<F> {
    pub blocks: Vec<BlockCache<F>>,
    /// Last-layer hidden states, `(batch · seq) × d`.
    pub hidden: Array2<F>,
}

pub(crate) fn embed<F: Scalar>(params: &ModelParams<F>, batch: &PaddedBatch) -> Array2<F> {
    let d = params.config.d_model;
    let mut x = Array2::zeros((batch.rows(), d));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        let t = r % batch.seq;
        row.assign(&params.token_embedding.row(batch.ids[r]));
        row += &params.position_embedding.row(t);
    }
    x
}

/// Multi-head attention over `qkv` rows. Keys past each sequence's length
/// are masked; causal models also mask future keys.
pub(crate) fn attention<F: Scalar>(
    qkv: &Array2<F>,
    batch: &PaddedBatch,
    n_heads: usize,
    causal: bool,
    mut probs_out: Option<&mut Vec<Array2<F>>>,
) -> Array2<F> {
    let d = qkv.ncols() / 3;
    let hd = d / n_heads;
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let t = batch.seq;
    let mut out = Array2::zeros((batch.rows(), d));
    for b in 0..batch.batch() {
        let rows = b * t..(b + 1) * t;
        let len = batch.lengths[b];
        for h in 0..n_heads {
            let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut scores = q.dot(&k.t());
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let limit = if causal { len.min(i + 1) } else { len };
                let mut max = F::neg_infinity();
                for j in 0..limit {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut total = F::zero();
                for j in 0..t {
                    if j < limit {
                        let e = (row[j] - max).exp();
                        row[j] = e;
                        total += e;
                    } else {
                        row[j] = F::zero();
                    }
                }
                row.mapv_inplace(|e| e / total);
            }
            out.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                .assign(&scores.dot(&v));
            if let Some(p) = probs_out.as_deref_mut() {
                p.push(scores);
            }
        }
    }
    out
}

fn affine<F: Scalar>(x: ArrayView2<F>, w: &Array2<F>, b: &ndarray::Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn block_forward<F: Scalar>(
    layer: &LayerParams<F>,
    x: &mut Array2<F>,
    batch: &PaddedBatch,
    config: &ModelConfig,
    keep: bool,
) -> Option<BlockCache<F>> {
    let eps = F::lit(config.ln_epsilon);
    let (ln1_xhat, ln1_rstd) = normalize_rows(x.view(), eps);
    let ln1_out = &ln1_xhat * &layer.ln1_gamma + &layer.ln1_beta;
    let qkv = affine(ln1_out.view(), &layer.w_qkv, &layer.b_qkv);
    let mut probs = Vec::new();
    let causal = config.variant == Variant::Causal;
    let attn = attention(&qkv, batch, config.n_heads, causal, keep.then_some(&mut probs));
    *x += &affine(attn.view(), &layer.w_out, &layer.b_out);
    let (ln2_xhat, ln2_rstd) = normalize_rows(x.view(), eps);
    let ln2_out = &ln2_xhat * &layer.ln2_gamma + &layer.ln2_beta;
    let ff_pre = affine(ln2_out.view(), &layer.w_ff1, &layer.b_ff1);
    let ff_act = ff_pre.mapv(gelu);
    *x += &affine(ff_act.view(), &layer.w_ff2, &layer.b_ff2);
    keep.then(|| BlockCache {
        ln1_xhat,
        ln1_rstd,
        ln1_out,
        qkv,
        probs,
        attn,
        ln2_xhat,
        ln2_rstd,
        ln2_out,
        ff_pre,
        ff_act,
    })
}

/// Run the transformer body. With `keep`, per-block intermediates are retained.
pub(crate) fn forward_body<F: Scalar>(params: &ModelParams<F>, batch: &PaddedBatch, keep: bool) -> BodyOutput<F> {
    let mut x = embed(params, batch);
    let mut blocks = Vec::new();
    for layer in &params.layers {
        if let Some(c) = block_forward(layer, &mut x, batch, &params.config, keep) {
            blocks.push(c);
        }
    }
    BodyOutput { blocks, hidden: x }
}

/// Last-layer hidden states for every position, before the prediction head.
///
/// Sequences may differ in length; the result is `batch × max_len × d` and
/// rows past a sequence's end are unspecified.
pub fn forward_hidden<F: Scalar, S: AsRef<[usize]>>(params: &ModelParams<F>, batch: &[S]) -> Result<Array3<F>> {
    let padded = PaddedBatch::new(batch, &params.config)?;
    let out = forward_body(params, &padded, false);
    let d = params.config.d_model;
    Ok(out
        .hidden
        .into_shape_with_order((padded.batch(), padded.seq, d))
        .expect("row-major hidden states"))
}

#[cfg(test)]
/// Hidden states of a single sequence as a `len × d` matrix.
pub(crate) fn hidden_for_sequence<F: Scalar>(params: &ModelParams<F>, ids: &[usize]) -> Result<Array2<F>> {
    let h = forward_hidden(params, &[ids])?;
    Ok(h.index_axis_move(Axis(0), 0))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    #[test]
    fn single_token_shape() {
        let p = ModelParams::<f32>::init(&tiny_config(Variant::Causal), 0).unwrap();
        let h = forward_hidden(&p, &[vec![3]]).unwrap();
        assert_eq!(h.dim(), (1, 1, 8));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ModelParams::<f32>::init(&tiny_config(Variant::Causal), 0).unwrap();
        assert!(matches!(
            forward_hidden(&p, &[vec![11]]),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
        assert!(matches!(
            forward_hidden(&p, &[vec![1; 13]]),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_edits() {
        let p = perturbed::<f64>(&tiny_config(Variant::Causal), 1, 0.3);
        let a = forward_hidden(&p, &[vec![1, 2, 3, 4, 5, 6]]).unwrap();
        let b = forward_hidden(&p, &[vec![1, 2, 3, 9, 10, 0]]).unwrap();
        for t in 0..3 {
            assert_eq!(a.slice(s![0, t, ..]), b.slice(s![0, t, ..]));
        }
        assert_ne!(a.slice(s![0, 3, ..]), b.slice(s![0, 3, ..]));
    }

    #[test]
    fn masked_model_sees_the_future() {
        let p = perturbed::<f64>(&tiny_config(Variant::Masked), 1, 0.3);
        let a = forward_hidden(&p, &[vec![1, 2, 3, 4]]).unwrap();
        let b = forward_hidden(&p, &[vec![1, 2, 3, 9]]).unwrap();
        assert_ne!(a.slice(s![0, 0, ..]), b.slice(s![0, 0, ..]));
    }

    #[test]
    fn identical_rows_identical_states() {
        let p = perturbed::<f32>(&tiny_config(Variant::Masked), 2, 0.3);
        let h = forward_hidden(&p, &[vec![4, 5, 6], vec![4, 5, 6]]).unwrap();
        assert_eq!(h.index_axis(Axis(0), 0), h.index_axis(Axis(0), 1));
    }

    #[test]
    fn padding_does_not_leak() {
        for variant in [Variant::Causal, Variant::Masked] {
            let p = perturbed::<f64>(&tiny_config(variant), 3, 0.3);
            let alone = forward_hidden(&p, &[vec![4, 5, 6]]).unwrap();
            let padded = forward_hidden(&p, &[vec![4, 5, 6], vec![1, 2, 3, 4, 5, 6, 7]]).unwrap();
            let a = alone.slice(s![0, .., ..]);
            let b = padded.slice(s![0, ..3, ..]);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_embedding_feeds_both_ends() {
        use crate::head::InterventionSpec;
        let p = perturbed::<f64>(&tiny_config(Variant::Causal), 4, 0.3);
        let ids = vec![2, 5, 7];
        let h0 = hidden_for_sequence(&p, &ids).unwrap();
        let l0 = p.head.logits(h0.view(), p.token_embedding.view(), &InterventionSpec::identity()).unwrap();
        let mut q = p.clone();
        q.token_embedding.row_mut(9).mapv_inplace(|v| v + 0.5);
        let h1 = hidden_for_sequence(&q, &ids).unwrap();
        assert_eq!(h0, h1, "token 9 is not an input");
        let l1 = q.head.logits(h1.view(), q.token_embedding.view(), &InterventionSpec::identity()).unwrap();
        assert_ne!(l0.column(9), l1.column(9));
        let mut r = p.clone();
        r.token_embedding.row_mut(5).mapv_inplace(|v| v + 0.5);
        assert_ne!(hidden_for_sequence(&r, &ids).unwrap(), h0);
    }
}
