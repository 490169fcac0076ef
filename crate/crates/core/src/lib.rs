//! Tree-structured GRPO post-training for small conditional flow-matching
//! generators on synthetic 2-D tasks.
//!
//! The crate is organized bottom-up:
//!
//! - [`flow_model`]: the conditional velocity-field MLP, flow-matching loss and
//!   pretraining, the score estimator, and the checkpoint format.
//! - [`sampler`]: the noise-level schedule plus deterministic (ODE) and
//!   stochastic (SDE) denoising steps with Gaussian transition log-densities.
//! - [`tree`]: the denoising search tree, its combinatorics and NFE accounting.
//! - [`scheduler`]: per-epoch choice of the branching window.
//! - [`rewards`]: synthetic terminal reward models and running statistics.
//! - [`advantage`]: leaf normalization, multi-reward combination, leaf-to-root
//!   backup and effective sample size.
//! - [`grpo`]: importance ratios, the clipped surrogate and the policy update.
//! - [`baseline`]: trajectory-level GRPO with uniform per-step credit.
//! - [`harness`]: configuration, the training loop, logging and evaluation.
//! - [`verification`]: independent reference oracles used by tests and by the
//!   `verify` subcommand.

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod baseline;
pub mod error;
pub mod flow_model;
pub mod grpo;
pub mod harness;
pub mod optim;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod scheduler;
pub mod tree;
pub mod verification;

pub use error::{Error, Result};
