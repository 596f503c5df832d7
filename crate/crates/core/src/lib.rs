//! Structured cooperative learning simulator.
//!
//! K simulated clients alternate between learning personalized models and
//! learning a cooperation graph by variational EM. The graph prior is
//! pluggable: a fixed mixing matrix (which reduces to decentralized parallel
//! SGD), a stochastic block model, a mixed-membership block model, or an
//! attention prior over encoded model updates.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod experiment;
pub mod math;
pub mod model;
pub mod net;
pub mod tasks;

pub use error::{Result, ScoolError};
