//! Particle engine for mean-field stochastic flows.
//!
//! The library simulates flows of McKean-Vlasov type with a replica-particle
//! approximation of the law, propagates the Jacobian and inverse-Jacobian
//! processes along every replica, integrates the truncated inverse flow on a
//! stored field, and detects the stopping times that bound the locally
//! invertible domain. A closed-form oracle for the 1-d mean-interaction
//! example validates the generic engine pathwise.

pub mod coefficients;
pub mod error;
pub mod experiments;
pub mod families;
pub mod flow;
pub mod grid;
pub mod inverse;
pub mod linalg;
pub mod measure;
pub mod oracle;
pub mod parallel;
pub mod paths;
pub mod stopping;

pub use error::{Error, Result};
