//! The prediction head and interventions on its bias parameters.
//!
//! Causal head: `p = softmax(LN(x) · W_embᵀ)` with
//! `LN(x) = (x - m(x)) / s(x) ⊙ γ + b_LN`.
//!
//! Masked head: `p = softmax(LN(GELU(x · W_FC + b_FC)) · W_embᵀ + b_last)`.
//!
//! `W_emb` is stored with one row per vocabulary item, so row `i` is the
//! output word embedding `w_i`. An [`InterventionSpec`] scales `b_LN` by λ
//! and can switch off `b_FC` and `b_last` at call time, so one trained model
//! serves a whole λ sweep.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::numeric::Scalar;

/// Bias intervention applied when evaluating the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntervention")]
pub struct InterventionSpec {
    /// Scale applied to `b_LN`, clamped to `[0, 1]`.
    pub lambda_ln: f64,
    pub use_b_fc: bool,
    pub use_b_last: bool,
}

#[derive(Deserialize)]
struct RawIntervention {
    lambda_ln: f64,
    #[serde(default = "yes")]
    use_b_fc: bool,
    #[serde(default = "yes")]
    use_b_last: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawIntervention> for InterventionSpec {
    type Error = Error;

    fn try_from(raw: RawIntervention) -> Result<Self> {
        InterventionSpec::new(raw.lambda_ln, raw.use_b_fc, raw.use_b_last)
    }
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl InterventionSpec {
    pub fn new(lambda_ln: f64, use_b_fc: bool, use_b_last: bool) -> Result<Self> {
        if lambda_ln.is_nan() {
            return Err(Error::invalid("lambda_ln is NaN"));
        }
        Ok(Self {
            lambda_ln: lambda_ln.clamp(0.0, 1.0),
            use_b_fc,
            use_b_last,
        })
    }

    /// The unmodified head.
    pub fn identity() -> Self {
        Self {
            lambda_ln: 1.0,
            use_b_fc: true,
            use_b_last: true,
        }
    }

    /// Only `b_LN` scaled by `lambda`.
    pub fn lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, true, true)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Parameters of the prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub gamma: Array1<F>,
    pub b_ln: Array1<F>,
    /// `d × d`, applied as `x · W_FC`. Masked head only.
    pub w_fc: Option<Array2<F>>,
    pub b_fc: Option<Array1<F>>,
    pub b_last: Option<Array1<F>>,
    pub ln_epsilon: F,
}

/// Cached intermediates of a batched head evaluation.
#[derive(Debug, Clone)]
pub(crate) struct HeadForward<F> {
    pub input: Array2<F>,
    pub fc_pre: Option<Array2<F>>,
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
    pub z: Array2<F>,
    pub logits: Array2<F>,
}

impl<F: Scalar> HeadParams<F> {
    /// Identity-initialized causal head: `γ = 1`, `b_LN = 0`.
    pub fn causal(d: usize, ln_epsilon: F) -> Self {
        Self {
            gamma: Array1::ones(d),
            b_ln: Array1::zeros(d),
            w_fc: None,
            b_fc: None,
            b_last: None,
            ln_epsilon,
        }
    }

    /// Masked head with identity `W_FC` and zero biases.
    pub fn masked(d: usize, vocab_size: usize, ln_epsilon: F) -> Self {
        Self {
            w_fc: Some(Array2::eye(d)),
            b_fc: Some(Array1::zeros(d)),
            b_last: Some(Array1::zeros(vocab_size)),
            ..Self::causal(d, ln_epsilon)
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn variant(&self) -> Variant {
        if self.w_fc.is_some() {
            Variant::Masked
        } else {
            Variant::Causal
        }
    }

    pub fn validate(&self, variant: Variant, d: usize, vocab_size: usize) -> Result<()> {
        if self.gamma.len() != d || self.b_ln.len() != d {
            return Err(Error::shape("head LayerNorm", d, self.gamma.len()));
        }
        match variant {
            Variant::Causal => {
                if self.w_fc.is_some() || self.b_fc.is_some() || self.b_last.is_some() {
                    return Err(Error::invalid("causal head must not carry FC or b_last"));
                }
            }
            Variant::Masked => {
                let (Some(w), Some(b), Some(last)) = (&self.w_fc, &self.b_fc, &self.b_last) else {
                    return Err(Error::invalid("masked head needs W_FC, b_FC and b_last"));
                };
                if w.dim() != (d, d) || b.len() != d {
                    return Err(Error::shape("head FC", format!("({d}, {d})"), format!("{:?}", w.dim())));
                }
                if last.len() != vocab_size {
                    return Err(Error::shape("b_last", vocab_size, last.len()));
                }
            }
        }
        if !(self.ln_epsilon > F::zero()) {
            return Err(Error::invalid("ln_epsilon must be positive"));
        }
        Ok(())
    }

    /// A copy with `b_LN` scaled and disabled biases zeroed.
    pub fn apply_intervention(&self, iv: &InterventionSpec) -> Self {
        let lam = F::lit(iv.lambda_ln);
        let mut out = self.clone();
        out.b_ln = self.b_ln.mapv(|v| v * lam);
        if !iv.use_b_fc {
            if let Some(b) = out.b_fc.as_mut() {
                b.fill(F::zero());
            }
        }
        if !iv.use_b_last {
            if let Some(b) = out.b_last.as_mut() {
                b.fill(F::zero());
            }
        }
        out
    }

    fn check_inputs(&self, hidden: &ArrayView2<F>, emb: &ArrayView2<F>) -> Result<()> {
        let d = self.dim();
        if hidden.ncols() != d {
            return Err(Error::shape("head input", d, hidden.ncols()));
        }
        if emb.ncols() != d {
            return Err(Error::shape("embedding width", d, emb.ncols()));
        }
        if let Some(last) = &self.b_last {
            if last.len() != emb.nrows() {
                return Err(Error::shape("b_last", emb.nrows(), last.len()));
            }
        }
        if d < 2 {
            return Err(Error::invalid("LayerNorm needs d >= 2"));
        }
        Ok(())
    }

    /// Input to the head LayerNorm: `x` (causal) or `GELU(x · W_FC + b_FC)` (masked).
    fn ln_input(&self, hidden: ArrayView2<F>, iv: &InterventionSpec) -> (Option<Array2<F>>, Array2<F>) {
        match &self.w_fc {
            None => (None, hidden.to_owned()),
            Some(w) => {
                let mut pre = hidden.dot(w);
                if iv.use_b_fc {
                    if let Some(b) = &self.b_fc {
                        pre += b;
                    }
                }
                let act = pre.mapv(gelu);
                (Some(pre), act)
            }
        }
    }

    pub(crate) fn forward(
        &self,
        hidden: ArrayView2<F>,
        emb: ArrayView2<F>,
        iv: &InterventionSpec,
    ) -> Result<HeadForward<F>> {
        self.check_inputs(&hidden, &emb)?;
        let (fc_pre, u) = self.ln_input(hidden, iv);
        let (xhat, rstd) = normalize_rows(u.view(), self.ln_epsilon);
        let lam = F::lit(iv.lambda_ln);
        let bias = self.b_ln.mapv(|v| v * lam);
        let z = &xhat * &self.gamma + &bias;
        let mut logits = z.dot(&emb.t());
        if iv.use_b_last {
            if let Some(b) = &self.b_last {
                logits += b;
            }
        }
        Ok(HeadForward {
            input: hidden.to_owned(),
            fc_pre,
            xhat,
            rstd,
            z,
            logits,
        })
    }

    /// Logits for a batch of hidden states (one row per position).
    pub fn logits(&self, hidden: ArrayView2<F>, emb: ArrayView2<F>, iv: &InterventionSpec) -> Result<Array2<F>> {
        Ok(self.forward(hidden, emb, iv)?.logits)
    }

    /// Probabilities for a batch of hidden states.
    pub fn probabilities(
        &self,
        hidden: ArrayView2<F>,
        emb: ArrayView2<F>,
        iv: &InterventionSpec,
    ) -> Result<Array2<F>> {
        let mut logits = self.logits(hidden, emb, iv)?;
        softmax_rows_in_place(&mut logits);
        Ok(logits)
    }

    /// Head-LayerNorm states immediately before `b_LN` is added:
    /// `(u - m(u)) / s(u) ⊙ γ`.
    pub fn pre_bias_states(&self, hidden: ArrayView2<F>, iv: &InterventionSpec) -> Result<Array2<F>> {
        if hidden.ncols() != self.dim() {
            return Err(Error::shape("head input", self.dim(), hidden.ncols()));
        }
        let (_, u) = self.ln_input(hidden, iv);
        let (xhat, _) = normalize_rows(u.view(), self.ln_epsilon);
        Ok(xhat * &self.gamma)
    }

    /// Backpropagate `dlogits` through the head. Accumulates parameter
    /// gradients into `grads` and `d_emb`, returns the gradient w.r.t. the
    /// head input.
    pub(crate) fn backward(
        &self,
        cache: &HeadForward<F>,
        dlogits: ArrayView2<F>,
        emb: ArrayView2<F>,
        iv: &InterventionSpec,
        grads: &mut HeadParams<F>,
        d_emb: &mut Array2<F>,
    ) -> Array2<F> {
        *d_emb += &dlogits.t().dot(&cache.z);
        if iv.use_b_last {
            if let Some(g) = grads.b_last.as_mut() {
                *g += &dlogits.sum_axis(Axis(0));
            }
        }
        let dz = dlogits.dot(&emb);
        grads.gamma += &(&dz * &cache.xhat).sum_axis(Axis(0));
        grads.b_ln += &(dz.sum_axis(Axis(0)) * F::lit(iv.lambda_ln));
        let du = layer_norm_backward(dz.view(), cache.xhat.view(), cache.rstd.view(), self.gamma.view());
        match (&self.w_fc, &cache.fc_pre) {
            (Some(w), Some(pre)) => {
                let mut da = du;
                Zip::from(&mut da).and(pre).for_each(|g, &a| *g *= gelu_grad(a));
                if let Some(gw) = grads.w_fc.as_mut() {
                    *gw += &cache.input.t().dot(&da);
                }
                if iv.use_b_fc {
                    if let Some(gb) = grads.b_fc.as_mut() {
                        *gb += &da.sum_axis(Axis(0));
                    }
                }
                da.dot(&w.t())
            }
            _ => du,
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            b_ln: Array1::zeros(self.b_ln.len()),
            w_fc: self.w_fc.as_ref().map(|w| Array2::zeros(w.dim())),
            b_fc: self.b_fc.as_ref().map(|b| Array1::zeros(b.len())),
            b_last: self.b_last.as_ref().map(|b| Array1::zeros(b.len())),
            ln_epsilon: self.ln_epsilon,
        }
    }
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    F::lit(0.5) * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of the exact GELU, `Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let cdf = F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::lit(0.5)).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// `((x - m(x)) / sqrt(var(x) + ε)) ⊙ γ + b` with population variance.
pub fn layer_norm<F: Scalar>(
    x: ArrayView1<F>,
    gamma: ArrayView1<F>,
    bias: ArrayView1<F>,
    eps: F,
) -> Result<Array1<F>> {
    let d = x.len();
    if d < 2 {
        return Err(Error::invalid(format!("layer_norm needs d >= 2, got {d}")));
    }
    if gamma.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", d, gamma.len().max(bias.len())));
    }
    let (xhat, _) = normalize_rows(x.insert_axis(Axis(0)), eps);
    Ok(xhat.row(0).to_owned() * gamma + bias)
}

/// Row-wise `(x - m) * rstd` and the per-row `rstd = 1/sqrt(var + ε)`.
pub(crate) fn normalize_rows<F: Scalar>(x: ArrayView2<F>, eps: F) -> (Array2<F>, Array1<F>) {
    let d = F::from_usize(x.ncols()).expect("dimension fits");
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *r = inv;
    }
    (xhat, rstd)
}

/// Gradient w.r.t. the LayerNorm input given the gradient of its output.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dout: ArrayView2<F>,
    xhat: ArrayView2<F>,
    rstd: ArrayView1<F>,
    gamma: ArrayView1<F>,
) -> Array2<F> {
    let d = F::from_usize(dout.ncols()).expect("dimension fits");
    let mut dx = &dout * &gamma;
    for ((mut g, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd.iter()) {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut g)
            .and(&xh)
            .for_each(|v, &x| *v = (*v - mean_g - x * mean_gx) * r);
    }
    dx
}

pub(crate) fn softmax_rows_in_place<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

fn single_row<F: Scalar>(
    x: ArrayView1<F>,
    head: &HeadParams<F>,
    iv: &InterventionSpec,
    emb: ArrayView2<F>,
) -> Result<Array1<F>> {
    let probs = head.probabilities(x.insert_axis(Axis(0)), emb, iv)?;
    Ok(probs.row(0).to_owned())
}

/// `softmax(LN(x; γ, λ·b_LN) · W_embᵀ)` for one hidden state.
pub fn predict_causal<F: Scalar>(
    x: ArrayView1<F>,
    head: &HeadParams<F>,
    iv: &InterventionSpec,
    emb: ArrayView2<F>,
) -> Result<Array1<F>> {
    if head.variant() != Variant::Causal {
        return Err(Error::VariantMismatch {
            expected: "causal",
            found: "masked",
        });
    }
    single_row(x, head, iv, emb)
}

/// `softmax(LN(GELU(x · W_FC + b_FC); γ, λ·b_LN) · W_embᵀ + b_last)` for one hidden state.
pub fn predict_masked<F: Scalar>(
    x: ArrayView1<F>,
    head: &HeadParams<F>,
    iv: &InterventionSpec,
    emb: ArrayView2<F>,
) -> Result<Array1<F>> {
    if head.variant() != Variant::Masked {
        return Err(Error::VariantMismatch {
            expected: "masked",
            found: "causal",
        });
    }
    single_row(x, head, iv, emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
    }

    fn random_masked_head(rng: &mut ChaCha8Rng, d: usize, v: usize) -> HeadParams<f64> {
        HeadParams {
            gamma: random_vec(rng, d),
            b_ln: random_vec(rng, d),
            w_fc: Some(random_matrix(rng, d, d)),
            b_fc: Some(random_vec(rng, d)),
            b_last: Some(random_vec(rng, v)),
            ln_epsilon: 1e-5,
        }
    }

    /// Straight-line evaluation of the masked head with scalar loops.
    fn masked_oracle(x: &[f64], h: &HeadParams<f64>, emb: &Array2<f64>, iv: &InterventionSpec) -> Vec<f64> {
        let d = x.len();
        let w = h.w_fc.as_ref().unwrap();
        let bfc = h.b_fc.as_ref().unwrap();
        let mut u = vec![0.0; d];
        for j in 0..d {
            let mut s = if iv.use_b_fc { bfc[j] } else { 0.0 };
            for i in 0..d {
                s += x[i] * w[[i, j]];
            }
            u[j] = 0.5 * s * (1.0 + libm::erf(s / 2f64.sqrt()));
        }
        let mean = u.iter().sum::<f64>() / d as f64;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let sd = (var + h.ln_epsilon).sqrt();
        let z: Vec<f64> = (0..d)
            .map(|j| (u[j] - mean) / sd * h.gamma[j] + iv.lambda_ln * h.b_ln[j])
            .collect();
        let logits: Vec<f64> = (0..emb.nrows())
            .map(|t| {
                let mut s: f64 = (0..d).map(|j| z[j] * emb[[t, j]]).sum();
                if iv.use_b_last {
                    s += h.b_last.as_ref().unwrap()[t];
                }
                s
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn layer_norm_unit_input() {
        let y = layer_norm(array![1.0f64, -1.0].view(), array![1.0, 1.0].view(), array![0.0, 0.0].view(), 1e-5).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-4 && (y[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_scaled_and_shifted() {
        let y = layer_norm(array![3.0f64, 1.0].view(), array![2.0, 2.0].view(), array![1.0, -1.0].view(), 1e-5).unwrap();
        assert!((y[0] - 3.0).abs() < 1e-4, "{y}");
        assert!((y[1] + 3.0).abs() < 1e-4, "{y}");
    }

    #[test]
    fn layer_norm_constant_input() {
        let y = layer_norm(array![5.0, 5.0].view(), array![1.0, 1.0].view(), array![0.5, 0.5].view(), 1e-5).unwrap();
        assert_eq!(y, array![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_needs_two_dims() {
        let r = layer_norm(array![1.0].view(), array![1.0].view(), array![0.0].view(), 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn causal_two_token_example() {
        let head = HeadParams::<f64>::causal(2, 1e-5);
        let emb = array![[1.0, 0.0], [0.0, 1.0]];
        let p = predict_causal(array![1.0, -1.0].view(), &head, &InterventionSpec::identity(), emb.view()).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-3 && (p[1] - 0.1192).abs() < 1e-3, "{p}");
    }

    #[test]
    fn lambda_zero_equals_zeroed_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = HeadParams::<f64>::causal(6, 1e-5);
        head.gamma = random_vec(&mut rng, 6);
        head.b_ln = random_vec(&mut rng, 6);
        let emb = random_matrix(&mut rng, 9, 6);
        let x = random_vec(&mut rng, 6);
        let p0 = predict_causal(x.view(), &head, &InterventionSpec::lambda(0.0).unwrap(), emb.view()).unwrap();
        let mut zeroed = head.clone();
        zeroed.b_ln.fill(0.0);
        let pz = predict_causal(x.view(), &zeroed, &InterventionSpec::identity(), emb.view()).unwrap();
        assert_eq!(p0, pz);
    }

    #[test]
    fn masked_head_reduces_to_causal_in_gelu_linear_regime() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let emb = random_matrix(&mut rng, 7, d);
        let x = array![20.0, 30.0, 25.0, 40.0];
        let mut causal = HeadParams::<f64>::causal(d, 1e-5);
        causal.gamma = random_vec(&mut rng, d);
        causal.b_ln = random_vec(&mut rng, d);
        let masked = HeadParams {
            w_fc: Some(Array2::eye(d)),
            b_fc: Some(Array1::zeros(d)),
            b_last: Some(Array1::zeros(7)),
            ..causal.clone()
        };
        let iv = InterventionSpec::identity();
        let pc = predict_causal(x.view(), &causal, &iv, emb.view()).unwrap();
        let pm = predict_masked(x.view(), &masked, &iv, emb.view()).unwrap();
        for (a, b) in pc.iter().zip(pm.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_b_last_toggle_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = random_masked_head(&mut rng, 5, 8);
        head.b_last = Some(Array1::zeros(8));
        let emb = random_matrix(&mut rng, 8, 5);
        let x = random_vec(&mut rng, 5);
        let on = predict_masked(x.view(), &head, &InterventionSpec::new(1.0, true, true).unwrap(), emb.view()).unwrap();
        let off = predict_masked(x.view(), &head, &InterventionSpec::new(1.0, true, false).unwrap(), emb.view()).unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn variant_mismatch_errors() {
        let causal = HeadParams::<f64>::causal(3, 1e-5);
        let masked = HeadParams::<f64>::masked(3, 4, 1e-5);
        let emb = Array2::<f64>::zeros((4, 3));
        let x = Array1::<f64>::zeros(3);
        let iv = InterventionSpec::identity();
        assert!(matches!(
            predict_masked(x.view(), &causal, &iv, emb.view()),
            Err(Error::VariantMismatch { .. })
        ));
        assert!(predict_causal(x.view(), &masked, &iv, emb.view()).is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let head = HeadParams::<f64>::causal(3, 1e-5);
        let emb = Array2::<f64>::zeros((4, 2));
        let x = Array1::<f64>::zeros(3);
        assert!(matches!(
            predict_causal(x.view(), &head, &InterventionSpec::identity(), emb.view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn apply_intervention_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = random_masked_head(&mut rng, 4, 6);
        assert_eq!(head.apply_intervention(&InterventionSpec::identity()), head);
        let scaled = head.apply_intervention(&InterventionSpec::lambda(0.6).unwrap());
        for (a, b) in scaled.b_ln.iter().zip(head.b_ln.iter()) {
            assert_eq!(*a, 0.6 * b);
        }
        let off = head.apply_intervention(&InterventionSpec::new(1.0, false, false).unwrap());
        assert!(off.b_fc.unwrap().iter().all(|&v| v == 0.0));
        assert!(off.b_last.unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(head.b_fc.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn intervention_json() {
        let iv: InterventionSpec =
            serde_json::from_str(r#"{"lambda_ln": 0.6, "use_b_fc": true, "use_b_last": true}"#).unwrap();
        assert_eq!(iv, InterventionSpec::new(0.6, true, true).unwrap());
        let json = serde_json::to_string(&iv).unwrap();
        assert_eq!(json, r#"{"lambda_ln":0.6,"use_b_fc":true,"use_b_last":true}"#);
        let clamped: InterventionSpec = serde_json::from_str(r#"{"lambda_ln": 1.7}"#).unwrap();
        assert_eq!(clamped.lambda_ln, 1.0);
        assert_eq!(InterventionSpec::lambda(-0.2).unwrap().lambda_ln, 0.0);
        assert!(InterventionSpec::lambda(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn causal_output_is_a_distribution(seed in any::<u64>(), scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut head = HeadParams::<f64>::causal(5, 1e-5);
            head.gamma = random_vec(&mut rng, 5);
            head.b_ln = random_vec(&mut rng, 5);
            let emb = random_matrix(&mut rng, 12, 5) * scale;
            let x = random_vec(&mut rng, 5) * scale;
            let lam = rng.random_range(0.0..=1.0);
            let p = predict_causal(x.view(), &head, &InterventionSpec::lambda(lam).unwrap(), emb.view()).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn f32_output_is_a_distribution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = random_masked_head(&mut rng, 6, 10);
            let head32 = HeadParams {
                gamma: head.gamma.mapv(|v| v as f32),
                b_ln: head.b_ln.mapv(|v| v as f32),
                w_fc: head.w_fc.map(|w| w.mapv(|v| v as f32)),
                b_fc: head.b_fc.map(|w| w.mapv(|v| v as f32)),
                b_last: head.b_last.map(|w| w.mapv(|v| v as f32)),
                ln_epsilon: 1e-5f32,
            };
            let emb = random_matrix(&mut rng, 10, 6).mapv(|v| v as f32);
            let x = random_vec(&mut rng, 6).mapv(|v| v as f32);
            let p = predict_masked(x.view(), &head32, &InterventionSpec::identity(), emb.view()).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn lambda_continuity(seed in any::<u64>(), lam in 0.0f64..0.999) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut head = HeadParams::<f64>::causal(5, 1e-5);
            head.gamma = random_vec(&mut rng, 5);
            head.b_ln = random_vec(&mut rng, 5) * 3.0;
            let emb = random_matrix(&mut rng, 9, 5) * 3.0;
            let x = random_vec(&mut rng, 5);
            let a = predict_causal(x.view(), &head, &InterventionSpec::lambda(lam).unwrap(), emb.view()).unwrap();
            let b = predict_causal(x.view(), &head, &InterventionSpec::lambda(lam + 1e-6).unwrap(), emb.view()).unwrap();
            let sup = a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(sup < 1e-4);
        }

        #[test]
        fn bias_shifts_log_probs_by_centered_products(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut head = HeadParams::<f64>::causal(6, 1e-5);
            head.gamma = random_vec(&mut rng, 6);
            head.b_ln = random_vec(&mut rng, 6);
            let emb = random_matrix(&mut rng, 11, 6);
            let x = random_vec(&mut rng, 6);
            let p1 = predict_causal(x.view(), &head, &InterventionSpec::lambda(1.0).unwrap(), emb.view()).unwrap();
            let p0 = predict_causal(x.view(), &head, &InterventionSpec::lambda(0.0).unwrap(), emb.view()).unwrap();
            let diff: Vec<f64> = p1.iter().zip(p0.iter()).map(|(a, b)| a.ln() - b.ln()).collect();
            let prods = emb.dot(&head.b_ln);
            let dm = diff.iter().sum::<f64>() / diff.len() as f64;
            let pm = prods.sum() / prods.len() as f64;
            for (d, p) in diff.iter().zip(prods.iter()) {
                prop_assert!(((d - dm) - (p - pm)).abs() < 1e-5);
            }
        }

        #[test]
        fn masked_head_matches_straight_line_oracle(seed in any::<u64>(), fc in any::<bool>(), last in any::<bool>(), lam in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, v) = (5, 9);
            let head = random_masked_head(&mut rng, d, v);
            let emb = random_matrix(&mut rng, v, d);
            let x = random_vec(&mut rng, d) * 2.0;
            let iv = InterventionSpec::new(lam, fc, last).unwrap();
            let p = predict_masked(x.view(), &head, &iv, emb.view()).unwrap();
            let o = masked_oracle(x.as_slice().unwrap(), &head, &emb, &iv);
            for (a, b) in p.iter().zip(&o) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn applied_head_equals_call_time_intervention(seed in any::<u64>(), fc in any::<bool>(), last in any::<bool>(), lam in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = random_masked_head(&mut rng, 4, 7);
            let emb = random_matrix(&mut rng, 7, 4);
            let iv = InterventionSpec::new(lam, fc, last).unwrap();
            let applied = head.apply_intervention(&iv);
            for _ in 0..5 {
                let x = random_vec(&mut rng, 4);
                let a = predict_masked(x.view(), &head, &iv, emb.view()).unwrap();
                let b = predict_masked(x.view(), &applied, &InterventionSpec::identity(), emb.view()).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
