//! Word-error statistics and subgroup fairness testing for speech
//! recognition output.
//!
//! Utterance error counts are modeled as Poisson with the log reference
//! length as offset. A group factor and nuisance covariates enter as fixed
//! effects; per-speaker heterogeneity enters as a Gaussian random
//! intercept, integrated out by adaptive Gauss-Hermite quadrature. The
//! empirical-ratio bootstrap is available as a baseline for comparison.
//!
//! ```
//! use asr_fairness::alignment::{align, tokenize};
//!
//! let counts = align(&tokenize("turn the lights off", true), &tokenize("turn lights of", true));
//! assert_eq!(counts.total(), 2);
//! ```

pub mod alignment;
pub mod dataset;
pub mod error;
pub mod glm;
pub mod glmm;
pub mod inference;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod simulation;
pub mod special;

pub use alignment::{align, corpus_wer, tokenize, ErrorCounts, TokenSeq};
pub use dataset::{load_corpus, summarize, Corpus, CorpusSummary, GroupFactor, LoadOptions, Utterance};
pub use error::{Error, Result};
pub use glm::{dispersion, fit_glm, FittedGlm, ModelSpec};
pub use glmm::{conditional_modes, fit_glmm, speaker_marginal_loglik, FittedGlmm, MixedModelSpec, SpeakerBlock};
pub use inference::{baseline_ratio, lrt, model_ratio, RatioEstimate, TestResult};
pub use rng::StreamRng;
pub use simulation::{gen_confounding, gen_speaker_effect, run_experiment, SimConfig, SimReport};
