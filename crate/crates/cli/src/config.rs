//! Experiment configuration, read from TOML. Every command-line flag has a
//! field here; flags override the file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use headbias::corpus::synthetic::SyntheticCorpusConfig;
use headbias::generation::Strategy;
use headbias::{ModelConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::require_file;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsSection,
    pub synth: SyntheticCorpusConfig,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub analysis: AnalysisSection,
    pub generation: GenerationSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub max_vocab: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { max_vocab: 2000 }
    }
}

/// Model shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub ln_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Causal,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            ln_epsilon: 1e-5,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            ln_epsilon: self.ln_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub lambda: f64,
    pub use_b_fc: bool,
    pub use_b_last: bool,
    pub num_bins: usize,
    /// Documents taken from the end of the corpus; `0` uses all of them.
    pub max_docs: usize,
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            use_b_fc: true,
            use_b_last: true,
            num_bins: 15,
            max_docs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub lambdas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub k: usize,
    pub p: f64,
    pub prompt_len: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    pub seed: u64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            lambdas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            strategies: vec![Strategy::TopP],
            k: 50,
            p: 0.9,
            prompt_len: 10,
            max_len: 1024,
            num_prompts: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k_clusters: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k_clusters: 10, seed: 0 }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        require_file(path)?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: ExperimentConfig = toml::from_str(
            "[model]\nd_model = 16\n[train]\nsteps = 50\n[generation]\nstrategies = [\"top_k\"]\n",
        )
        .unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.train.steps, 50);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.generation.strategies, vec![Strategy::TopK]);
        assert_eq!(c.generation.lambdas.len(), 11);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
