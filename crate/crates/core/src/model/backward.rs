use ndarray::{s, Array2, Axis, Zip};

use super::forward::{forward_body, BlockCache, PaddedBatch};
use super::{LayerParams, ModelParams};
use crate::error::{Error, Result};
use crate::head::{gelu_grad, layer_norm_backward, InterventionSpec};
use crate::numeric::Scalar;

/// Training sequences plus the positions whose predictions are scored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainBatch {
    pub inputs: Vec<Vec<usize>>,
    /// `(sequence index, position, target id)`.
    pub sites: Vec<(usize, usize, usize)>,
}

impl TrainBatch {
    fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::NoPredictionSites);
        }
        for &(b, t, target) in &self.sites {
            let len = self.inputs.get(b).map(Vec::len).unwrap_or(0);
            if t >= len {
                return Err(Error::invalid(format!("site ({b}, {t}) outside its sequence")));
            }
            if target >= vocab_size {
                return Err(Error::TokenOutOfRange { id: target, vocab_size });
            }
        }
        Ok(())
    }
}

struct LossPass<F> {
    loss: F,
    dlogits: Array2<F>,
}

/// Mean cross-entropy over the sites and the gradient of the logits.
fn cross_entropy<F: Scalar>(logits: &Array2<F>, targets: impl Iterator<Item = usize>) -> LossPass<F> {
    let n = F::from_usize(logits.nrows()).expect("site count fits");
    let mut dlogits = logits.clone();
    let mut loss = F::zero();
    for ((mut row, target), z) in dlogits.rows_mut().into_iter().zip(targets).zip(logits.rows()) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        loss += total.ln() + max - z[target];
        row.mapv_inplace(|e| e / total);
        row[target] -= F::one();
        row.mapv_inplace(|g| g / n);
    }
    LossPass { loss: loss / n, dlogits }
}

/// Mean cross-entropy over `batch.sites` and its gradient w.r.t. every parameter.
pub fn loss_and_grad<F: Scalar>(params: &ModelParams<F>, batch: &TrainBatch) -> Result<(f64, ModelParams<F>)> {
    let (loss, grads) = run(params, batch, true)?;
    Ok((loss.as_f64(), grads.expect("gradients requested")))
}

#[cfg(test)]
/// Loss only, in the parameter precision.
pub(crate) fn batch_loss<F: Scalar>(params: &ModelParams<F>, batch: &TrainBatch) -> Result<F> {
    Ok(run(params, batch, false)?.0)
}

fn run<F: Scalar>(
    params: &ModelParams<F>,
    batch: &TrainBatch,
    with_grad: bool,
) -> Result<(F, Option<ModelParams<F>>)> {
    let config = &params.config;
    batch.validate(config.vocab_size)?;
    let padded = PaddedBatch::new(&batch.inputs, config)?;
    let body = forward_body(params, &padded, with_grad);
    let rows: Vec<usize> = batch.sites.iter().map(|&(b, t, _)| b * padded.seq + t).collect();
    let hs = body.hidden.select(Axis(0), &rows);
    let iv = InterventionSpec::identity();
    let emb = params.token_embedding.view();
    let head_cache = params.head.forward(hs.view(), emb, &iv)?;
    let pass = cross_entropy(&head_cache.logits, batch.sites.iter().map(|s| s.2));
    if !with_grad {
        return Ok((pass.loss, None));
    }

    let mut grads = params.zeros_like();
    let mut d_emb = Array2::zeros(params.token_embedding.dim());
    let dhs = params
        .head
        .backward(&head_cache, pass.dlogits.view(), emb, &iv, &mut grads.head, &mut d_emb);
    let mut dx = Array2::zeros(body.hidden.dim());
    for (&r, g) in rows.iter().zip(dhs.rows()) {
        let mut row = dx.row_mut(r);
        row += &g;
    }
    for ((layer, cache), g) in params
        .layers
        .iter()
        .zip(&body.blocks)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dx = block_backward(layer, cache, dx, &padded, params, g);
    }
    for (r, g) in dx.rows().into_iter().enumerate() {
        let mut e = d_emb.row_mut(padded.ids[r]);
        e += &g;
        let mut p = grads.position_embedding.row_mut(r % padded.seq);
        p += &g;
    }
    grads.token_embedding = d_emb;
    Ok((pass.loss, Some(grads)))
}

/// Backpropagate through one pre-LN block. `dx` is the gradient w.r.t. the
/// block output; returns the gradient w.r.t. its input.
fn block_backward<F: Scalar>(
    layer: &LayerParams<F>,
    c: &BlockCache<F>,
    dx: Array2<F>,
    batch: &PaddedBatch,
    params: &ModelParams<F>,
    g: &mut LayerParams<F>,
) -> Array2<F> {
    // Feed-forward branch.
    g.w_ff2 += &c.ff_act.t().dot(&dx);
    g.b_ff2 += &dx.sum_axis(Axis(0));
    let mut dpre = dx.dot(&layer.w_ff2.t());
    Zip::from(&mut dpre).and(&c.ff_pre).for_each(|d, &a| *d *= gelu_grad(a));
    g.w_ff1 += &c.ln2_out.t().dot(&dpre);
    g.b_ff1 += &dpre.sum_axis(Axis(0));
    let dln2 = dpre.dot(&layer.w_ff1.t());
    g.ln2_gamma += &(&dln2 * &c.ln2_xhat).sum_axis(Axis(0));
    g.ln2_beta += &dln2.sum_axis(Axis(0));
    let dx1 = dx + layer_norm_backward(dln2.view(), c.ln2_xhat.view(), c.ln2_rstd.view(), layer.ln2_gamma.view());

    // Attention branch.
    g.w_out += &c.attn.t().dot(&dx1);
    g.b_out += &dx1.sum_axis(Axis(0));
    let dattn = dx1.dot(&layer.w_out.t());
    let dqkv = attention_backward(&c.qkv, &c.probs, &dattn, batch, params.config.n_heads);
    g.w_qkv += &c.ln1_out.t().dot(&dqkv);
    g.b_qkv += &dqkv.sum_axis(Axis(0));
    let dln1 = dqkv.dot(&layer.w_qkv.t());
    g.ln1_gamma += &(&dln1 * &c.ln1_xhat).sum_axis(Axis(0));
    g.ln1_beta += &dln1.sum_axis(Axis(0));
    dx1 + layer_norm_backward(dln1.view(), c.ln1_xhat.view(), c.ln1_rstd.view(), layer.ln1_gamma.view())
}

fn attention_backward<F: Scalar>(
    qkv: &Array2<F>,
    probs: &[Array2<F>],
    dattn: &Array2<F>,
    batch: &PaddedBatch,
    n_heads: usize,
) -> Array2<F> {
    let d = dattn.ncols();
    let hd = d / n_heads;
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let t = batch.seq;
    let mut dqkv = Array2::zeros(qkv.dim());
    for b in 0..batch.batch() {
        let rows = b * t..(b + 1) * t;
        for h in 0..n_heads {
            let p = &probs[b * n_heads + h];
            let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let d_o = dattn.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let dp = d_o.dot(&v.t());
            let dv = p.t().dot(&d_o);
            // Softmax backward; masked entries have p = 0 and drop out.
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x = (*x - pp * dot) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d + h * hd..d + (h + 1) * hd]).assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::model::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_batch(variant: Variant, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens = [7, 4, 9];
        let inputs: Vec<Vec<usize>> = lens
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(0..11)).collect())
            .collect();
        let mut sites = Vec::new();
        for (b, seq) in inputs.iter().enumerate() {
            for t in 0..seq.len() {
                let keep = match variant {
                    Variant::Causal => t + 1 < seq.len(),
                    Variant::Masked => t % 2 == 0,
                };
                if keep {
                    sites.push((b, t, rng.random_range(0..11)));
                }
            }
        }
        TrainBatch { inputs, sites }
    }

    /// Central differences on every entry of every tensor.
    fn check_gradients(variant: Variant) {
        let config = tiny_config(variant);
        let params = perturbed::<f64>(&config, 7, 0.2);
        let batch = micro_batch(variant, 3);
        let (_, grads) = loss_and_grad(&params, &batch).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.data.to_vec()))
            .collect();
        let h = 1e-5;
        let mut probe = params.clone();
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let (name, ana) = &analytic[ti];
            for i in 0..ana.len() {
                let orig = probe.tensors_mut()[ti].1[i];
                probe.tensors_mut()[ti].1[i] = orig + h;
                let up = batch_loss(&probe, &batch).unwrap();
                probe.tensors_mut()[ti].1[i] = orig - h;
                let down = batch_loss(&probe, &batch).unwrap();
                probe.tensors_mut()[ti].1[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = ana[i];
                let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-6);
                assert!(rel <= 1e-3, "{variant} {name}[{i}]: analytic {a}, numeric {fd}, rel {rel}");
            }
        }
    }

    #[test]
    fn causal_gradients_match_finite_differences() {
        check_gradients(Variant::Causal);
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        check_gradients(Variant::Masked);
    }

    #[test]
    fn loss_matches_direct_log_softmax() {
        let config = tiny_config(Variant::Causal);
        let params = perturbed::<f64>(&config, 1, 0.2);
        let batch = micro_batch(Variant::Causal, 1);
        let (loss, _) = loss_and_grad(&params, &batch).unwrap();
        let mut total = 0.0;
        for &(b, t, target) in &batch.sites {
            let h = super::super::forward::hidden_for_sequence(&params, &batch.inputs[b]).unwrap();
            let logits = params
                .head
                .logits(h.slice(s![t..t + 1, ..]), params.token_embedding.view(), &InterventionSpec::identity())
                .unwrap();
            let row: Vec<f64> = logits.row(0).to_vec();
            total -= crate::numeric::log_softmax_f64(&row)[target];
        }
        let expected = total / batch.sites.len() as f64;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn rejects_empty_sites() {
        let params = ModelParams::<f32>::init(&tiny_config(Variant::Causal), 0).unwrap();
        let batch = TrainBatch {
            inputs: vec![vec![1, 2]],
            sites: vec![],
        };
        assert!(matches!(loss_and_grad(&params, &batch), Err(Error::NoPredictionSites)));
    }
}
