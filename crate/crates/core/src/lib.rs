// SPDX-License-Identifier: MIT OR Apache-2.0

//! # lenskit
//!
//! Mechanistic-interpretability toolkit for studying edits that look
//! successful on direct queries but revert under attack prefixes.
//!
//! - [`model`]: a small decoder-only transformer engine that records every
//!   internal vector (residual stream, MLP and `W_O` taps, per-head vectors).
//! - [`lens`]: logit-lens projections, latent ranks, inhibition scores and
//!   per-head latent original-answer probabilities.
//! - [`interventions`]: residual patching, attention layer/head ablation and
//!   singular-vector ablation of head output matrices.
//! - [`metrics`]: OM/OP, efficacy, generalization, locality, ablation deltas
//!   and decoding success rate.
//! - [`probes`]: attack prefix constructors and the dataset filter pipeline.
//! - [`unlearning`]: rejection detection and the unlearning analysis mode.
//! - [`toy`]: seeded random models, a planted-circuit model and scripted
//!   text models for tests and demos.
//!
//! With the default `parallel` feature, per-case work runs on rayon; without
//! it everything runs sequentially with identical results.

pub mod cache;
pub mod error;
pub mod interventions;
pub mod jsonl;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod probes;
pub mod toy;
pub mod unlearning;

pub use error::{LensError, Result};
