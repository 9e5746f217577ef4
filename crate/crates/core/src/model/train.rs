use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{loss_and_grad, TrainBatch};
use super::eval::mean_cross_entropy;
use super::{is_matrix_name, ModelConfig, ModelParams, Variant};
use crate::corpus::{mask_corrupt, EncodedCorpus, MaskingRates, PredictionSet, Vocab};
use crate::error::{Error, Result};
use crate::head::InterventionSpec;
use crate::numeric::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Documents per step.
    pub batch_size: usize,
    /// Documents are cropped to this many tokens (and to `max_seq_len`).
    pub seq_len: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the peak (cosine decay).
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Held-out evaluation period in steps; `0` evaluates only at the ends.
    pub eval_every: usize,
    /// Documents taken from the end of the corpus for held-out loss.
    pub held_out_docs: usize,
    pub masking: MaskingRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            seq_len: 64,
            learning_rate: 3e-4,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 250,
            held_out_docs: 100,
            masking: MaskingRates::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::invalid("batch_size must be positive and seq_len at least 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("adam_eps must be positive; grad_clip and weight_decay non-negative"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::invalid("min_lr_ratio must lie in [0, 1]"));
        }
        self.masking.validate()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * warm * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// One row of the loss curve. Step 0 carries only the initial held-out loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub params: ModelParams<F>,
    pub history: Vec<LossRecord>,
    pub initial_heldout: Option<f64>,
    pub final_heldout: Option<f64>,
}

impl<F> TrainOutcome<F> {
    /// Loss curve as CSV (`step,train_loss,heldout_loss`).
    pub fn write_loss_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new<F: Scalar>(params: &ModelParams<F>) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step<F: Scalar>(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let clip = if cfg.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|g| g.as_f64() * g.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let grad_views = grads.tensors();
        for (i, (name, p)) in params.tensors_mut().into_iter().enumerate() {
            let decay = if is_matrix_name(&name) { cfg.weight_decay } else { 0.0 };
            let g = grad_views[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j].as_f64() * clip;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps) + decay * p[j].as_f64();
                p[j] -= F::lit(lr * update);
            }
        }
    }
}

fn heldout_set(docs: &[Vec<usize>], variant: Variant, max_len: usize, vocab: &Vocab, tcfg: &TrainConfig) -> Result<PredictionSet> {
    Ok(match variant {
        Variant::Causal => PredictionSet::causal(docs, max_len),
        Variant::Masked => PredictionSet::masked(docs, max_len, vocab, &tcfg.masking, tcfg.seed ^ 0x6e1d0)?,
    })
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    docs: &[Vec<usize>],
    variant: Variant,
    max_len: usize,
    vocab: &Vocab,
    tcfg: &TrainConfig,
) -> Result<TrainBatch> {
    loop {
        let mut batch = TrainBatch::default();
        for _ in 0..tcfg.batch_size {
            let doc = &docs[rng.random_range(0..docs.len())];
            let crop = &doc[..doc.len().min(max_len)];
            let b = batch.inputs.len();
            match variant {
                Variant::Causal => {
                    batch.sites.extend((0..crop.len() - 1).map(|t| (b, t, crop[t + 1])));
                    batch.inputs.push(crop.to_vec());
                }
                Variant::Masked => {
                    let (input, targets) = mask_corrupt(crop, vocab, &tcfg.masking, rng)?;
                    batch.sites.extend(targets.into_iter().map(|t| (b, t, crop[t])));
                    batch.inputs.push(input);
                }
            }
        }
        if !batch.sites.is_empty() {
            return Ok(batch);
        }
        if tcfg.masking.select_rate == 0.0 {
            return Err(Error::invalid("masking select_rate 0 leaves nothing to predict"));
        }
    }
}

/// Train a freshly initialized model.
pub fn train<F: Scalar>(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &EncodedCorpus,
    vocab: &Vocab,
) -> Result<TrainOutcome<F>> {
    if tcfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let params = ModelParams::init(config, tcfg.seed)?;
    finetune(params, tcfg, corpus, vocab)
}

/// Continue training `params` on `corpus`. Zero steps returns the input unchanged.
pub fn finetune<F: Scalar>(
    mut params: ModelParams<F>,
    tcfg: &TrainConfig,
    corpus: &EncodedCorpus,
    vocab: &Vocab,
) -> Result<TrainOutcome<F>> {
    tcfg.validate()?;
    params.validate()?;
    let config = params.config.clone();
    if vocab.len() != config.vocab_size {
        return Err(Error::shape("vocabulary size", config.vocab_size, vocab.len()));
    }
    let held_n = tcfg.held_out_docs.min(corpus.len().saturating_sub(1));
    let (train_part, held_part) = corpus.split_tail(held_n);
    let max_len = tcfg.seq_len.min(config.max_seq_len);
    let min_len = if config.variant == Variant::Causal { 2 } else { 1 };
    let docs: Vec<Vec<usize>> = train_part.docs.into_iter().filter(|d| d.len() >= min_len).collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let held = heldout_set(&held_part.docs, config.variant, max_len, vocab, tcfg)?;
    let iv = InterventionSpec::identity();
    let eval = |p: &ModelParams<F>| -> Result<Option<f64>> {
        if held.is_empty() {
            Ok(None)
        } else {
            mean_cross_entropy(p, &held, &iv).map(Some)
        }
    };

    let initial = eval(&params)?;
    let mut history = vec![LossRecord {
        step: 0,
        train_loss: None,
        heldout_loss: initial,
    }];
    let mut latest = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(0x7a1);
    let mut adam = Adam::new(&params);
    for step in 1..=tcfg.steps {
        let batch = sample_batch(&mut rng, &docs, config.variant, max_len, vocab, tcfg)?;
        let (loss, grads) = loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut params, &grads, tcfg, tcfg.lr_at(step));
        if !params.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let evaluate = step == tcfg.steps || (tcfg.eval_every > 0 && step % tcfg.eval_every == 0);
        let heldout_loss = if evaluate { eval(&params)? } else { None };
        if evaluate {
            latest = heldout_loss;
            log::info!("step {step}: train {loss:.4}, held-out {heldout_loss:?}");
        }
        history.push(LossRecord {
            step,
            train_loss: Some(loss),
            heldout_loss,
        });
    }
    Ok(TrainOutcome {
        params,
        history,
        initial_heldout: initial,
        final_heldout: latest,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_config;
    use super::*;
    use crate::corpus::build_vocab;

    fn toy_corpus() -> (Vocab, EncodedCorpus) {
        let words = ["a", "b", "c", "d", "e", "f", "g"];
        let texts: Vec<String> = (0..60)
            .map(|i| (0..8).map(|t| words[(i + t * 3) % 7]).collect::<Vec<_>>().join(" "))
            .collect();
        let vocab = build_vocab(&texts, 11).unwrap();
        let enc = EncodedCorpus::encode(&texts, &vocab);
        (vocab, enc)
    }

    fn quick(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seq_len: 12,
            learning_rate: lr,
            warmup_steps: 2,
            eval_every: 5,
            held_out_docs: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (vocab, corpus) = toy_corpus();
        for variant in [Variant::Causal, Variant::Masked] {
            let config = tiny_config(variant);
            let out = train::<f32>(&config, &quick(10, 0.0), &corpus, &vocab).unwrap();
            assert_eq!(out.params, ModelParams::init(&config, 0).unwrap());
            let held: Vec<f64> = out.history.iter().filter_map(|r| r.heldout_loss).collect();
            assert!(held.len() >= 2);
            assert!(held.iter().all(|&l| l == held[0]));
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let (vocab, corpus) = toy_corpus();
        let config = tiny_config(Variant::Masked);
        let a = train::<f32>(&config, &quick(15, 1e-2), &corpus, &vocab).unwrap();
        let b = train::<f32>(&config, &quick(15, 1e-2), &corpus, &vocab).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn loss_decreases_on_a_learnable_corpus() {
        let (vocab, corpus) = toy_corpus();
        let config = tiny_config(Variant::Causal);
        let out = train::<f32>(&config, &quick(150, 1e-2), &corpus, &vocab).unwrap();
        assert!(out.final_heldout.unwrap() < out.initial_heldout.unwrap() - 0.5);
        assert!(out.params.all_finite());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_step() {
        let (vocab, corpus) = toy_corpus();
        let config = tiny_config(Variant::Causal);
        let cfg = TrainConfig {
            grad_clip: 0.0,
            warmup_steps: 0,
            ..quick(50, 1e30)
        };
        match train::<f32>(&config, &cfg, &corpus, &vocab) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.final_heldout)),
        }
    }

    #[test]
    fn zero_step_finetune_is_identity() {
        let (vocab, corpus) = toy_corpus();
        let params = ModelParams::<f32>::init(&tiny_config(Variant::Causal), 3).unwrap();
        let out = finetune(params.clone(), &quick(0, 1e-3), &corpus, &vocab).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            min_lr_ratio: 0.1,
            ..Default::default()
        };
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn vocab_size_mismatch_rejected() {
        let (vocab, corpus) = toy_corpus();
        let mut config = tiny_config(Variant::Causal);
        config.vocab_size = 12;
        assert!(train::<f32>(&config, &quick(1, 1e-3), &corpus, &vocab).is_err());
    }
}
