//! Probabilistic federated prompt aggregation.
//!
//! Clients upload sets of prompt vectors; the server explains them with a
//! non-parametric pool of summarizing prompts under a hierarchical generative
//! model (a Bernoulli point process over pool members, Gaussian noise around
//! the selected members). Assignments between local and pool prompts are
//! inferred exactly by weighted bipartite matching, and the pool together with
//! the two small networks of the generative model is fitted by alternating
//! maximum likelihood.
//!
//! Module map:
//!
//! - [`model`]: domain types and the selection/variance networks.
//! - [`likelihood`]: log-likelihood, its assignment-linear form, cost matrices and gradients.
//! - [`matching`]: rectangular Hungarian solver and per-client assignment inference.
//! - [`aggregation`]: candidate pool construction, alternating optimization, pruning.
//! - [`partition`]: Dirichlet, dominant-class imbalance and long-tailed client partitions.
//! - [`clients`]: simulated clients (prompt selection, generative and drift local tuning).
//! - [`baselines`]: position-wise prompt averaging and GMM centroid aggregation.
//! - [`runner`]: multi-round federated simulation and recovery metrics.
//! - [`format`]: text formats for pools, parameters and metric streams.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod baselines;
pub mod clients;
mod error;
pub mod format;
pub mod likelihood;
pub mod matching;
pub mod model;
pub mod numeric;
pub mod partition;
pub mod runner;
pub mod seed;

pub use error::{PfptError, Result};
pub use model::{Assignment, GenerativeParams, GlobalPool, LocalPromptSet, MlpParams, Prompt};
