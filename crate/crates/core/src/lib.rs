//! Melanoma classification benchmark harness.
//!
//! A from-scratch reverse-mode tensor engine drives a two-branch CNN (image
//! plus static patient features), trained with Adam under early stopping and
//! plateau learning-rate decay, optionally transfer-learned from a portable
//! weight archive. Around it sit the evaluation statistics (AUROC, AUPRC,
//! t-based confidence intervals, Welch tests), integrated-gradients
//! attribution and random hyperparameter search.

pub mod attribution;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hyperopt;
pub mod model;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use transfer::WeightArchive;
