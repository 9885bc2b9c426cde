//! GYC: counterfactual text generation for a small causal language model.
//!
//! Given an input sentence and a condition (a classifier target or a reward
//! rule), the library learns an additive perturbation of the model's
//! key-value history that first regenerates the input and is then pushed to
//! produce diverse counterfactual variants satisfying the condition. It also
//! ships the substitution baselines, the evaluation metrics (label-flip,
//! diversity, content preservation, tree edit distance) and deterministic
//! toy corpora used to compare systems.

pub mod baselines;
pub mod checkpoint;
pub mod conditioning;
pub mod datasets;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod perturb;
pub mod scorers;
pub mod ted;
#[cfg(test)]
pub(crate) mod testutil;
pub mod vocab;

pub use error::{GycError, Result};
