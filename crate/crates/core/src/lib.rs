//! Sparse mixture-of-experts routing laboratory.
//!
//! Implements token-choice, expert-choice and global budgeted top-k ("usmoe")
//! routing over a unified sigmoid/softmax score, an exact enumeration oracle
//! for the underlying assignment problem, an SMoE layer with analytic
//! gradients, and a small training harness for comparing the mechanisms.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod routing;
pub mod scoring;
pub mod select;
pub mod suites;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
