//! Beam-search-aware fine-tuning for autoregressive item recommendation.
//!
//! The crate bundles a small reverse-mode autodiff engine, a catalog prefix
//! trie, a trainable sequence model, trie-constrained beam search with
//! pruning diagnostics, the training objectives, ranking metrics and an
//! experiment harness with a CLI.

pub mod autodiff;
pub mod catalog;
pub mod decode;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod par;
pub mod seqmodel;
