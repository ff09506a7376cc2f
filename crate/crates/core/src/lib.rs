//! Driving by imitation with subgoal-angle navigation commands.
//!
//! The crate bundles a deterministic 2D town simulator, a scripted expert,
//! demonstration recording and balancing, a from-scratch network engine with
//! three policy architectures, a trainer, and a closed-loop evaluator.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod expert;
pub mod geometry;
pub mod model;
pub mod sim;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
