//! Distance-aware prior calibration for Bayesian neural networks.
//!
//! A Gaussian prior whose scale grows with the distance of a test input from
//! the training set, `N(0, (σ₀ + e^φ·d₀(x*))² I)`, corrects out-of-distribution
//! overconfidence without retraining: the training posterior is inferred once
//! and reused as an importance distribution, and the scalar `φ` is calibrated
//! after the fact.
//!
//! Module map:
//!
//! - [`nnet`]: MLPs with flat parameter vectors and exact gradients.
//! - [`inference`]: MAP, ADVI and diagonal Laplace posteriors, posterior sampling.
//! - [`distance`]: projected nearest-neighbour pre-distance and its scaling.
//! - [`weights`]: posterior weights, marginal ratios and weighted predictive statistics.
//! - [`calibrate`]: calibration-set selection, target construction and the search over `φ`.
//! - [`metrics`]: AUROC, average precision, accuracy and test log-likelihood.
//! - [`data`]: datasets, synthetic generators and gap splits.
//! - [`pipeline`]: end-to-end experiments driven by one JSON configuration.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod data;
pub mod distance;
mod error;
pub mod inference;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod weights;

pub use error::{Error, Result};

// Chapters of the guide under `book/` compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/distance.md")]
    mod distance {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
