//! Meta-learned Bayesian optimization over discrete candidate sets.
//!
//! The central model is a query-selection policy built from a neural-feature
//! RBF kernel, an exact Gaussian-process posterior and a differentiable
//! acquisition layer. It is trained across many related tasks with
//! REINFORCE so that the kernel learns features that make the acquisition
//! find good candidates quickly. Baseline policies (marginal-likelihood deep
//! kernel, plain RBF GP, deep-sets RL, MetaBO-style, random) and an
//! evaluation harness for cumulative gap are included.

pub mod acquisition;
pub mod deepkernel;
pub mod diffmath;
pub mod error;
pub mod gp;
pub mod policy;
pub mod seeding;
pub mod stats;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
