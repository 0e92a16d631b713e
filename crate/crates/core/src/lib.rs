//! Energy-constrained self-training for unsupervised domain adaptation.
//!
//! A small tanh MLP trained on a labeled source domain is adapted to an
//! unlabeled target domain by alternating class-balanced pseudo-labelling
//! with retraining under an energy regularizer derived from its own logits.

// `!(x >= 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod energy;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod selftrain;

pub use error::{Error, Result};
