//! Training-free adaptation engine for frozen vision-language encoders.
//!
//! The engine works entirely on precomputed feature matrices. It builds
//! caption-based multimodal support caches (paired image and caption-prompt
//! embeddings with shared labels), runs zero-shot / TIP-X / M-Adapter /
//! fast-variant inference over them, sweeps inference hyperparameters on a
//! validation split, and scores the results. The neural models themselves
//! (captioner, text-to-image generator, feature encoder) sit behind small
//! JSON-over-HTTP clients with deterministic in-process stubs for testing.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`store`] — feature/label matrices and the binary cache file format.
//! * [`kernels`] — the inference math.
//! * [`search`] — grid construction and exhaustive hyperparameter search.
//! * [`eval`] — accuracy and support-quality metrics plus report emission.
//! * [`support`] — support-set construction and the few-shot cache.
//! * [`clients`] — service clients and their stubs.
//! * [`cli`] — the `caps` command-line entry point.

pub mod cli;
pub mod clients;
pub mod eval;
pub mod kernels;
pub mod rng;
pub mod search;
pub mod store;
pub mod support;

pub use kernels::{HyperParams, LogitsMatrix, Matrix, Method};
pub use store::{FeatureMatrix, OneHotLabels};
