//! Stochastic compartment model of blood cell maturation and its
//! deterministic large-population limit.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod empirical;
pub mod flow;
pub mod limit;
pub mod metrics;
pub mod rates;
pub mod ssa;
