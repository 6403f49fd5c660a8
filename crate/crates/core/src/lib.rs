//! One-layer attention models doing chain-of-thought path finding in trees.
//!
//! The backward task walks from a goal leaf up to the root; the forward task
//! first does the same and then retraces the path from the root down to the
//! goal. The crate covers tree sampling, embeddings, the two models with hand
//! derived gradients, explicit constructions, SGD training, the expected
//! gradient dynamics of the symmetric backward model, and generalization
//! checks on unseen tree shapes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod plot;
pub mod training;
pub mod trees;

pub use error::{Error, Result};
pub use model::Params;
