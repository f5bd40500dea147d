//! Neuro-symbolic process anomaly detection.
//!
//! This crate trains a denoising autoencoder to reconstruct event-log traces,
//! mines Declare constraints from the same log, and injects selected
//! constraints into the autoencoder as soft logical guiderails: each
//! constraint is compiled to a differentiable real-valued-logic expression
//! over the reconstructed activity distributions and folded into the
//! fine-tuning loss. Traces are classified as anomalous when their
//! reconstruction error exceeds a threshold; the symbolic fine-tuning stage
//! exists to keep rare but conformant traces below it.
//!
//! Pipeline stages, each usable on its own:
//!
//! 1. [`eventlog`] — CSV/XES ingestion, vocabularies, a seeded synthetic
//!    log generator with a rare-but-conformant branch.
//! 2. [`declare`] — Declare templates, crisp trace semantics, constraint
//!    mining with support/confidence, knowledge-base filtering.
//! 3. [`autoencoder`] — one-hot trace encoding, the denoising autoencoder,
//!    pretraining and reconstruction error.
//! 4. [`ltn`] — fuzzy connectives and power-mean aggregators, the
//!    Declare-to-fuzzy-logic compiler, satisfiability, fine-tuning.
//! 5. [`anomaly`] — seeded anomaly injection with ground-truth labels.
//! 6. [`detect`] — scoring, threshold heuristics, precision/recall/F1.
//! 7. [`pipeline`] — end-to-end experiment runs and the constraint
//!    ablation harness.
//!
//! Gradients come from [`tensorgrad`], a small reverse-mode engine over
//! dense `f64` arrays; there is no external ML runtime.
//!
//! With the default `parallel` feature, trace scoring, constraint mining
//! and ablation cells run on rayon. Disabling the feature yields a fully
//! sequential build with bit-identical results.

pub mod anomaly;
pub mod autoencoder;
pub mod declare;
pub mod detect;
pub mod error;
pub mod eventlog;
pub mod exec;
pub mod ltn;
pub mod pipeline;
pub mod rng;
pub mod tensorgrad;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
