//! Red-team simulation of knowledge-base poisoning attacks on
//! retrieval-augmented agents.
//!
//! The framework poisons a key-value demonstration store with a handful of
//! trigger-bearing records, optimizes the trigger with a constrained
//! gradient-guided beam search so that triggered queries land in their own
//! region of the retrieval embedding space, and measures retrieval success,
//! induced-action success, end-to-end outcome success and benign-utility
//! degradation under ablations, sweeps, embedder transfer, perturbations and
//! input-filtering defenses.
//!
//! Module map:
//! - [`corpus`]: tokenization, vocabulary, queries, trigger injection
//! - [`embedder`]: deterministic differentiable embedders and gradients
//! - [`kbase`]: the knowledge base, kNN retrieval, poison injection
//! - [`cluster`]: k-means centers for the uniqueness loss
//! - [`lm`]: n-gram surrogate language model (coherence and perplexity)
//! - [`agent`]: simulated agent, target loss and its black-box estimator
//! - [`losses`]: uniqueness/compactness losses and analytic gradients
//! - [`optimizer`]: constrained gradient-guided beam search
//! - [`eval`]: metrics, ablations, sweeps, transfer, PCA projections
//! - [`defense`]: perplexity filter, perturbations, rephrasing
//! - [`config`] / [`pipeline`] / [`synth`]: experiment plumbing

pub mod agent;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod defense;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod kbase;
pub mod lm;
pub mod losses;
pub mod optimizer;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
