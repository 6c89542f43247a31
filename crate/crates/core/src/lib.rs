//! Training-time unmergeability for low-rank adapters, weight-merging
//! operators and spaces, post-hoc protection baselines and numerical
//! checkers for the scale-degradation bounds.

pub mod backbone;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mergeops;
pub mod protect;
pub mod rng;
pub mod spaces;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
