//! Invariant prediction under interventions on the response.
//!
//! The crate simulates multi-environment data from linear structural causal
//! models whose response assignment changes across environments, builds the
//! per-environment "prediction module" features (OLS fits of each `X_k` on
//! each subset `X_R`), and fits a Lasso that penalizes only the module
//! coefficients while leaving the linear part in `X` unpenalized. A
//! population-level taxonomy labels every module as matched, redundant or
//! anti-matching, and an experiment harness drives the synthetic benchmarks.

pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod scm;
pub mod pipeline;
pub mod predict;
pub mod solver;
pub mod taxonomy;

pub use error::{Error, Result};
