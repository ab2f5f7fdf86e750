//! Multilevel dimension-independent likelihood-informed MCMC for Bayesian
//! inverse problems governed by an elliptic PDE on the unit square.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod hierarchy;
pub mod laplace;
pub mod lis;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod multilevel;
pub mod pipeline;
pub mod prior;
pub mod proposal;
pub mod rng;
pub mod toy;

pub use error::{Error, Result};
