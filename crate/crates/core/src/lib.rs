//! Feedback-conditional policy learning at desk scale.
//!
//! A policy `pi(o | x, c)` is trained to produce responses `o` to instructions `x`
//! given verbal feedback `c`, by maximum likelihood on `(x, o, c)` triples. At
//! test time it is conditioned on positive feedback. The crate provides a
//! synthetic task environment with an exact feedback likelihood, tabular and
//! neural policies, a brute-force posterior oracle, offline and online trainers,
//! scalar-reward baselines, and evaluation reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN. Index loops
// walk several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod sequence;
pub mod train;
pub mod vocab;

pub use error::{FcpError, Result};
