//! Small transformer language models with instrumented prediction heads.
//!
//! The crate trains causal and masked toy language models, exposes the bias
//! parameters of their prediction heads (`b_LN`, and for the masked head
//! `b_FC` and `b_last`), and provides the probes used to study how those
//! biases encode corpus word frequency:
//!
//! - [`corpus`]: whitespace vocabulary, unigram statistics, masking, binning.
//! - [`model`]: the transformer body, training loop and checkpoints.
//! - [`head`]: the prediction head and its bias interventions.
//! - [`analysis`]: averaged prediction distributions, KL, geometry probes.
//! - [`generation`]: top-k / top-p / vanilla sampling with a scaled `b_LN`.
//! - [`metrics`]: Distinct-n, n-gram diversity, perplexity, cluster divergence.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod head;
pub mod metrics;
pub mod model;
mod numeric;

pub use error::{Error, Result};
pub use head::{HeadParams, InterventionSpec};
pub use model::{ModelConfig, ModelParams, TrainConfig, Variant};
pub use numeric::Scalar;
