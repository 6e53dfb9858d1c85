//! Few-shot knowledge transfer under domain shift over precomputed
//! embeddings: graph propagation augmentation, a feature generator with
//! hybrid neural/prototype classifiers, and prototype alignment.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod augment;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
