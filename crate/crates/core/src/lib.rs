//! Sampling-time guidance for next-scale visual autoregression, on models
//! small enough to enumerate.
//!
//! The crate pairs a toy multi-scale residual tokenizer with two kinds of
//! next-scale predictor: an exactly enumerable tabular model and an
//! embedding-driven count model. On top sit classifier-free guidance (CFG),
//! visual prefix guidance (VPG) with corrupted-prefix references, a
//! truncating sampler, a brute-force oracle for the guided distributions, and
//! an experiment harness.
//!
//! ```
//! use vpglab_core::guidance::{GuidanceConfig, ReferenceMode};
//! use vpglab_core::model::{fixtures, Condition};
//! use vpglab_core::tokenizer::TokenMap;
//!
//! let model = fixtures::m1();
//! let prefix = vec![TokenMap::new(0, 1, 1, vec![0]).unwrap()];
//! let config = GuidanceConfig {
//!     vpg_scale: 1.0,
//!     reference: ReferenceMode::ExactMarginal,
//!     ..GuidanceConfig::default()
//! };
//! let mut rng = vpglab_core::seed::rng(0);
//! let step = vpglab_core::guidance::guided_step(&model, Condition::Class(0), &prefix, &config, &mut rng).unwrap();
//! let p = step.logits.probs();
//! assert!((p[0] - 0.72 / 1.04).abs() < 1e-12);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corruption;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod seed;
pub mod tokenizer;

pub use config::{LabModel, RunConfig};
pub use corruption::{CorruptionPlan, CorruptionVariant};
pub use error::{Error, Result};
pub use guidance::{BranchLogits, GuidanceConfig, ReferenceMode};
pub use model::{Condition, CountModel, LogitGrid, Predictor, TabularModel};
pub use oracle::Distribution;
pub use sampler::{SamplerConfig, SequenceLaw, Trace};
pub use tokenizer::{Codebook, Image, Latent, ScaleSchedule, TokenId, TokenMap, Tokenizer};
