//! Gradient-based hyperparameter optimisation in a single training run.
//!
//! The crate trains a model and tunes its optimiser hyperparameters (learning
//! rate, weight decay, momentum) at the same time, by estimating the gradient
//! of the validation loss with respect to those hyperparameters while the
//! underlying training run keeps going. The estimator treats the most recent
//! weight update as representative and approximates the response of the
//! trained weights with a truncated Neumann series, so one training episode
//! is enough; no restarts, no outer search loop.
//!
//! Module map:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation, including
//!   recording gradients as graph nodes so they can be differentiated again.
//! - [`model`]: small ReLU multilayer perceptrons and their loss graphs.
//! - [`update`]: the SGD-with-momentum update rule, hyperparameter
//!   transforms, and the Adam meta-optimiser that consumes hypergradients.
//! - [`hypergrad`]: the truncated-Neumann hypergradient estimator, an exact
//!   unrolled-differentiation oracle, and restricted baselines.
//! - [`data`]: CSV and IDX ingestion, splits, standardisation, batching.
//! - [`harness`]: the experiment runner, bootstrap statistics, exports.
//! - [`cli`]: the `onepass` command-line interface.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod harness;
pub mod hypergrad;
pub mod model;
mod seeds;
pub mod update;
