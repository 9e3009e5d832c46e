//! Optimization of parameterized Markov chains whose transition law and step
//! cost share one parameter vector.

// `!(x > 0.0)` style guards deliberately reject NaN; index loops walk parallel tables.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod exact;
pub mod fd;
pub mod mdp;
pub mod problems;
pub mod model;
pub mod rollout;
pub mod stats;
pub mod surrogate;
pub mod zlearn;

pub use error::{DsoError, Result};
pub use model::*;
