//! Learning causal discovery as a meta-reinforcement-learning problem.
//!
//! Linear-Gaussian structural causal models are wrapped in an episodic
//! environment where a recurrent actor-critic policy intervenes on variables
//! and edits a graph estimate; the estimate is scored against the true graph
//! by the directed structural Hamming distance.

pub mod env;
pub mod error;
pub mod graph;
pub mod policy;
pub mod scm;
pub mod stats;
pub mod trainer;
pub mod experiments;

pub use error::{Error, Result};
