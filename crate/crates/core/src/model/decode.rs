use ndarray::{s, Array1, Array2, Axis};

use super::{ModelParams, Variant};
use crate::error::{Error, Result};
use crate::head::{gelu, normalize_rows};
use crate::numeric::Scalar;

/// Incremental causal decoding with cached keys and values. Feeding tokens
/// one at a time yields the same hidden states as [`super::forward_hidden`]
/// on the whole prefix.
pub struct CausalDecoder<'a, F> {
    params: &'a ModelParams<F>,
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    len: usize,
}

impl<'a, F: Scalar> CausalDecoder<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Result<Self> {
        if params.config.variant != Variant::Causal {
            return Err(Error::VariantMismatch {
                expected: "causal",
                found: params.config.variant.name(),
            });
        }
        let shape = (params.config.max_seq_len, params.config.d_model);
        Ok(Self {
            params,
            keys: vec![Array2::zeros(shape); params.config.n_layers],
            values: vec![Array2::zeros(shape); params.config.n_layers],
            len: 0,
        })
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.params.config.max_seq_len
    }

    /// Consume one token and return the last-layer hidden state at its position.
    pub fn push(&mut self, token: usize) -> Result<Array1<F>> {
        let c = &self.params.config;
        if self.len >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: c.max_seq_len,
            });
        }
        if token >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: c.vocab_size,
            });
        }
        let d = c.d_model;
        let hd = c.head_dim();
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let eps = F::lit(c.ln_epsilon);
        let pos = self.len;
        let mut x = (&self.params.token_embedding.row(token) + &self.params.position_embedding.row(pos)).insert_axis(Axis(0));
        for (i, layer) in self.params.layers.iter().enumerate() {
            let (xh, _) = normalize_rows(x.view(), eps);
            let ln1 = xh * &layer.ln1_gamma + &layer.ln1_beta;
            let qkv = ln1.dot(&layer.w_qkv) + &layer.b_qkv;
            self.keys[i].row_mut(pos).assign(&qkv.slice(s![0, d..2 * d]));
            self.values[i].row_mut(pos).assign(&qkv.slice(s![0, 2 * d..]));
            let mut attn = Array2::zeros((1, d));
            for h in 0..c.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let q = qkv.slice(s![0, cols.clone()]);
                let k = self.keys[i].slice(s![..=pos, cols.clone()]);
                let v = self.values[i].slice(s![..=pos, cols.clone()]);
                let mut scores: Array1<F> = k.dot(&q);
                scores.mapv_inplace(|z| z * scale);
                let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
                scores.mapv_inplace(|z| (z - max).exp());
                let total = scores.sum();
                scores.mapv_inplace(|e| e / total);
                attn.slice_mut(s![0, cols]).assign(&v.t().dot(&scores));
            }
            x += &(attn.dot(&layer.w_out) + &layer.b_out);
            let (xh2, _) = normalize_rows(x.view(), eps);
            let ln2 = xh2 * &layer.ln2_gamma + &layer.ln2_beta;
            let act = (ln2.dot(&layer.w_ff1) + &layer.b_ff1).mapv(gelu);
            x += &(act.dot(&layer.w_ff2) + &layer.b_ff2);
        }
        self.len += 1;
        Ok(x.index_axis_move(Axis(0), 0))
    }
}
