//! A minimal pre-LN transformer (causal or bidirectional masked) whose
//! prediction head is a [`HeadParams`].
//!
//! The tied embedding matrix is stored as `vocab_size × d_model`: row `i` is
//! both the input embedding of token `i` and its output word embedding `w_i`.

mod backward;
mod checkpoint;
mod decode;
mod eval;
mod forward;
mod train;

use std::fmt;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::numeric::Scalar;

pub use backward::{loss_and_grad, TrainBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FILE, WEIGHTS_FILE};
pub use decode::CausalDecoder;
pub(crate) use eval::map_site_logits;
pub use eval::{mean_cross_entropy, mean_hidden_states, site_hidden_states, site_log_probs, SiteHidden};
pub use forward::forward_hidden;
pub use train::{finetune, train, LossRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Causal,
    Masked,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Causal => "causal",
            Variant::Masked => "masked",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_ln_epsilon")]
    pub ln_epsilon: f64,
}

fn default_ln_epsilon() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.d_model < 2 {
            return Err(Error::invalid("d_model must be at least 2 for LayerNorm"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_epsilon > 0.0) || !self.ln_epsilon.is_finite() {
            return Err(Error::invalid("ln_epsilon must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    /// `d × 3d`, columns ordered query, key, value.
    pub w_qkv: Array2<F>,
    pub b_qkv: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
    pub w_ff1: Array2<F>,
    pub b_ff1: Array1<F>,
    pub w_ff2: Array2<F>,
    pub b_ff2: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// Tied `W_emb`, one row per token.
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub head: HeadParams<F>,
}

/// Whether a named tensor is a weight matrix (subject to weight decay).
pub(crate) fn is_matrix_name(name: &str) -> bool {
    name.ends_with("w_qkv")
        || name.ends_with("w_out")
        || name.ends_with("w_ff1")
        || name.ends_with("w_ff2")
        || name == "head.w_fc"
        || name == "token_embedding"
        || name == "position_embedding"
}

/// Read-only view of one named parameter tensor.
pub struct TensorView<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

impl<F: Scalar> ModelParams<F> {
    /// GPT-2 style initialization: weights `N(0, 0.02²)`, residual output
    /// projections scaled by `1/√(2·n_layers)`, biases zero, LayerNorm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x1417);
        let mut normal = |rows: usize, cols: usize, s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(&mut rng)))
        };
        let token_embedding = normal(config.vocab_size, d, std);
        let position_embedding = normal(config.max_seq_len, d, std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                w_qkv: normal(d, 3 * d, std),
                b_qkv: Array1::zeros(3 * d),
                w_out: normal(d, d, resid_std),
                b_out: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w_ff1: normal(d, config.d_ff, std),
                b_ff1: Array1::zeros(config.d_ff),
                w_ff2: normal(config.d_ff, d, resid_std),
                b_ff2: Array1::zeros(d),
            });
        }
        let eps = F::lit(config.ln_epsilon);
        let head = match config.variant {
            Variant::Causal => HeadParams::causal(d, eps),
            Variant::Masked => HeadParams {
                w_fc: Some(normal(d, d, std)),
                ..HeadParams::masked(d, config.vocab_size, eps)
            },
        };
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            head,
        })
    }

    /// Check every tensor shape against `config`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let check2 = |name: &'static str, a: &Array2<F>, r: usize, k: usize| {
            if a.dim() != (r, k) {
                Err(Error::shape(name, format!("({r}, {k})"), format!("{:?}", a.dim())))
            } else {
                Ok(())
            }
        };
        let check1 = |name: &'static str, a: &Array1<F>, n: usize| {
            if a.len() != n {
                Err(Error::shape(name, n, a.len()))
            } else {
                Ok(())
            }
        };
        check2("token_embedding", &self.token_embedding, c.vocab_size, d)?;
        check2("position_embedding", &self.position_embedding, c.max_seq_len, d)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::shape("layers", c.n_layers, self.layers.len()));
        }
        for l in &self.layers {
            check1("ln1_gamma", &l.ln1_gamma, d)?;
            check1("ln1_beta", &l.ln1_beta, d)?;
            check2("w_qkv", &l.w_qkv, d, 3 * d)?;
            check1("b_qkv", &l.b_qkv, 3 * d)?;
            check2("w_out", &l.w_out, d, d)?;
            check1("b_out", &l.b_out, d)?;
            check1("ln2_gamma", &l.ln2_gamma, d)?;
            check1("ln2_beta", &l.ln2_beta, d)?;
            check2("w_ff1", &l.w_ff1, d, c.d_ff)?;
            check1("b_ff1", &l.b_ff1, c.d_ff)?;
            check2("w_ff2", &l.w_ff2, c.d_ff, d)?;
            check1("b_ff2", &l.b_ff2, d)?;
        }
        self.head.validate(c.variant, d, c.vocab_size)
    }

    /// All tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorView<'_, F>> {
        fn view<'a, F>(name: String, a: &'a dyn AsTensor<F>) -> TensorView<'a, F> {
            TensorView {
                name,
                shape: a.shape_vec(),
                data: a.flat(),
            }
        }
        let mut out = vec![
            view("token_embedding".into(), &self.token_embedding),
            view("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(view(format!("layers.{i}.ln1_gamma"), &l.ln1_gamma));
            out.push(view(format!("layers.{i}.ln1_beta"), &l.ln1_beta));
            out.push(view(format!("layers.{i}.w_qkv"), &l.w_qkv));
            out.push(view(format!("layers.{i}.b_qkv"), &l.b_qkv));
            out.push(view(format!("layers.{i}.w_out"), &l.w_out));
            out.push(view(format!("layers.{i}.b_out"), &l.b_out));
            out.push(view(format!("layers.{i}.ln2_gamma"), &l.ln2_gamma));
            out.push(view(format!("layers.{i}.ln2_beta"), &l.ln2_beta));
            out.push(view(format!("layers.{i}.w_ff1"), &l.w_ff1));
            out.push(view(format!("layers.{i}.b_ff1"), &l.b_ff1));
            out.push(view(format!("layers.{i}.w_ff2"), &l.w_ff2));
            out.push(view(format!("layers.{i}.b_ff2"), &l.b_ff2));
        }
        out.push(view("head.gamma".into(), &self.head.gamma));
        out.push(view("head.b_ln".into(), &self.head.b_ln));
        if let Some(w) = &self.head.w_fc {
            out.push(view("head.w_fc".into(), w));
        }
        if let Some(b) = &self.head.b_fc {
            out.push(view("head.b_fc".into(), b));
        }
        if let Some(b) = &self.head.b_last {
            out.push(view("head.b_last".into(), b));
        }
        out
    }

    /// Mutable flat slices of all tensors in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        let ModelParams {
            token_embedding,
            position_embedding,
            layers,
            head,
            ..
        } = self;
        out.push(("token_embedding".into(), flat_mut2(token_embedding)));
        out.push(("position_embedding".into(), flat_mut2(position_embedding)));
        for (i, l) in layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1_gamma"), flat_mut1(&mut l.ln1_gamma)));
            out.push((format!("layers.{i}.ln1_beta"), flat_mut1(&mut l.ln1_beta)));
            out.push((format!("layers.{i}.w_qkv"), flat_mut2(&mut l.w_qkv)));
            out.push((format!("layers.{i}.b_qkv"), flat_mut1(&mut l.b_qkv)));
            out.push((format!("layers.{i}.w_out"), flat_mut2(&mut l.w_out)));
            out.push((format!("layers.{i}.b_out"), flat_mut1(&mut l.b_out)));
            out.push((format!("layers.{i}.ln2_gamma"), flat_mut1(&mut l.ln2_gamma)));
            out.push((format!("layers.{i}.ln2_beta"), flat_mut1(&mut l.ln2_beta)));
            out.push((format!("layers.{i}.w_ff1"), flat_mut2(&mut l.w_ff1)));
            out.push((format!("layers.{i}.b_ff1"), flat_mut1(&mut l.b_ff1)));
            out.push((format!("layers.{i}.w_ff2"), flat_mut2(&mut l.w_ff2)));
            out.push((format!("layers.{i}.b_ff2"), flat_mut1(&mut l.b_ff2)));
        }
        out.push(("head.gamma".into(), flat_mut1(&mut head.gamma)));
        out.push(("head.b_ln".into(), flat_mut1(&mut head.b_ln)));
        if let Some(w) = head.w_fc.as_mut() {
            out.push(("head.w_fc".into(), flat_mut2(w)));
        }
        if let Some(b) = head.b_fc.as_mut() {
            out.push(("head.b_fc".into(), flat_mut1(b)));
        }
        if let Some(b) = head.b_last.as_mut() {
            out.push(("head.b_last".into(), flat_mut1(b)));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<F>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<F>| Array1::zeros(a.len());
        Self {
            config: self.config.clone(),
            token_embedding: z2(&self.token_embedding),
            position_embedding: z2(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: z1(&l.ln1_gamma),
                    ln1_beta: z1(&l.ln1_beta),
                    w_qkv: z2(&l.w_qkv),
                    b_qkv: z1(&l.b_qkv),
                    w_out: z2(&l.w_out),
                    b_out: z1(&l.b_out),
                    ln2_gamma: z1(&l.ln2_gamma),
                    ln2_beta: z1(&l.ln2_beta),
                    w_ff1: z2(&l.w_ff1),
                    b_ff1: z1(&l.b_ff1),
                    w_ff2: z2(&l.w_ff2),
                    b_ff2: z1(&l.b_ff2),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Convert every tensor to another precision.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::lit(v.as_f64()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::lit(v.as_f64()));
        ModelParams {
            config: self.config.clone(),
            token_embedding: c2(&self.token_embedding),
            position_embedding: c2(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: c1(&l.ln1_gamma),
                    ln1_beta: c1(&l.ln1_beta),
                    w_qkv: c2(&l.w_qkv),
                    b_qkv: c1(&l.b_qkv),
                    w_out: c2(&l.w_out),
                    b_out: c1(&l.b_out),
                    ln2_gamma: c1(&l.ln2_gamma),
                    ln2_beta: c1(&l.ln2_beta),
                    w_ff1: c2(&l.w_ff1),
                    b_ff1: c1(&l.b_ff1),
                    w_ff2: c2(&l.w_ff2),
                    b_ff2: c1(&l.b_ff2),
                })
                .collect(),
            head: HeadParams {
                gamma: c1(&self.head.gamma),
                b_ln: c1(&self.head.b_ln),
                w_fc: self.head.w_fc.as_ref().map(c2),
                b_fc: self.head.b_fc.as_ref().map(c1),
                b_last: self.head.b_last.as_ref().map(c1),
                ln_epsilon: G::lit(self.config.ln_epsilon),
            },
        }
    }
}

pub(crate) trait AsTensor<F> {
    fn shape_vec(&self) -> Vec<usize>;
    fn flat(&self) -> &[F];
}

impl<F> AsTensor<F> for Array1<F> {
    fn shape_vec(&self) -> Vec<usize> {
        vec![self.len()]
    }
    fn flat(&self) -> &[F] {
        self.as_slice().expect("standard layout")
    }
}

impl<F> AsTensor<F> for Array2<F> {
    fn shape_vec(&self) -> Vec<usize> {
        vec![self.nrows(), self.ncols()]
    }
    fn flat(&self) -> &[F] {
        self.as_slice().expect("standard layout")
    }
}

fn flat_mut1<F>(a: &mut Array1<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

fn flat_mut2<F>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            vocab_size: 11,
            ln_epsilon: 1e-5,
        }
    }

    /// Initialized params with every tensor perturbed so no bias or gain is trivial.
    pub fn perturbed<F: Scalar>(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams<F> {
        use rand::Rng;
        let mut p = ModelParams::<F>::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for (_, t) in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += F::lit(rng.random_range(-scale..scale));
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = tiny_config(Variant::Causal);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
        c.ln_epsilon = 1e-5;
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        for variant in [Variant::Causal, Variant::Masked] {
            let c = tiny_config(variant);
            let a = ModelParams::<f32>::init(&c, 4).unwrap();
            let b = ModelParams::<f32>::init(&c, 4).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            assert!(a.all_finite());
            assert_eq!(a.head.variant(), variant);
            assert_ne!(a, ModelParams::<f32>::init(&c, 5).unwrap());
        }
    }

    #[test]
    fn tensor_tables_agree() {
        let c = tiny_config(Variant::Masked);
        let mut p = ModelParams::<f64>::init(&c, 0).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        let sizes: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
        let mut_names: Vec<(String, usize)> = p.tensors_mut().into_iter().map(|(n, s)| (n, s.len())).collect();
        assert_eq!(names, mut_names.iter().map(|x| x.0.clone()).collect::<Vec<_>>());
        assert_eq!(sizes, mut_names.iter().map(|x| x.1).collect::<Vec<_>>());
        assert!(names.contains(&"head.b_last".to_string()));
        let causal = ModelParams::<f64>::init(&tiny_config(Variant::Causal), 0).unwrap();
        assert!(!causal.tensors().iter().any(|t| t.name.starts_with("head.b_fc")));
    }

    #[test]
    fn cast_round_trip() {
        let p = ModelParams::<f32>::init(&tiny_config(Variant::Masked), 1).unwrap();
        let q: ModelParams<f32> = p.cast::<f64>().cast();
        assert_eq!(p, q);
    }
}
