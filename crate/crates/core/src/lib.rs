//! Doubly robust treatment fusion for policy learning with many treatments.
//!
//! The pipeline has two stages. First, treatments whose outcome regressions
//! coincide are fused into groups: each arm is reweighted so its covariate
//! mean matches the pooled mean ([`calibration`]), then a weighted linear
//! working model with pairwise fusion penalties is fitted across arms and
//! groups are read off the estimated coefficients ([`fusion`]). Second, a
//! policy over the fused groups is learned by cross-fitted augmented inverse
//! propensity weighting and exact policy-tree search ([`nuisance`],
//! [`policy`]).
//!
//! [`synth`] and [`eval`] provide the benchmark scenarios and the replication
//! harness used to check the method end to end.

#![allow(clippy::needless_range_loop)]

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod nuisance;
pub mod policy;
pub mod synth;

pub use error::{Error, ErrorClass, Result};

/// The guide's chapters, compiled here so their examples run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
