//! Differentiable search over image augmentation policies.
//!
//! Sub-policy choice is a Categorical draw and each operation slot is a
//! Bernoulli draw. Both are relaxed with Gumbel-Softmax so that policy
//! parameters receive gradients, either straight-through, through the plain
//! score function, or through the RELAX control-variate estimator. Policy
//! parameters and classifier weights are trained in one pass by alternating
//! a weight step with a one-step-lookahead hypergradient step.

pub mod augment;
pub mod autodiff;
pub mod bilevel;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod models;
pub mod plot;
pub mod policy;
pub mod stats;

pub use error::{Error, Result};
