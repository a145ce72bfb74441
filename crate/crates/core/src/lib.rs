//! Numerical laboratory for in-context metalearning with a convex linear
//! attention model.
//!
//! Tasks are class-conditional Gaussian mixtures whose means share a
//! `k`-dimensional subspace of `R^d`. The crate generates such tasks, trains
//! the predictor `mu_hat^T W x_query` by full-batch gradient descent, solves
//! for the max-margin `W` that gradient descent converges to in direction,
//! compares against mean-estimation and SVM baselines, and checks the
//! concentration quantities that govern generalization.

pub mod attention;
pub mod baselines;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod io;
pub mod maxmargin;
pub mod rng;
pub mod taskgen;

pub use attention::{AttentionWeights, LossKind, TrainSettings, TrainTrace};
pub use error::{Error, Result};
pub use taskgen::{Label, MetaConfig, MetaTrainSet, Prompt, Subspace, TaskFeatures};
