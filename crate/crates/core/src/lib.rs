//! Structured report templates, autoregressive question sessions and
//! path-level evaluation.
//!
//! The pipeline runs vocabulary and corpus ([`lexicon`]) → question tree
//! ([`template`]) → gold reports and paths ([`report`]) → question sessions
//! against an agent ([`session`], [`agents`]) → scores ([`metrics`]).
//! [`synthgen`] produces self-describing synthetic data for every stage.

pub mod agents;
pub mod atomic;
pub mod lexicon;
pub mod metrics;
pub mod report;
pub mod session;
pub mod synthgen;
pub mod template;
#[cfg(feature = "testkit")]
pub mod testkit;

/// Scores in double precision.
pub type Metrics = metrics::MetricsResult<f64>;
pub type GroupMetrics = metrics::GroupMetrics<f64>;
