//! Long-tailed classification with an ensemble of class-balanced experts.
//!
//! The training split is sorted by class frequency and cut into three
//! contiguous subsets (Manyshot, Mediumshot, Fewshot). One expert is trained
//! per subset, each with an extra *reject* output absorbing every sample from
//! outside its subset. At inference the experts' partial posteriors are fused
//! into a posterior over all classes by one of five strategies:
//!
//! * KL-divergence minimisation ([`fusion::fuse_kl_min`])
//! * soft-voting ([`fusion::fuse_soft_vote`])
//! * expert selection ([`fusion::fuse_by_selection`])
//! * model stacking ([`fusion::fuse_by_stacking`])
//! * joint calibration ([`fusion::fuse_calibrated`])
//!
//! Everything operates on feature embeddings. The [`network`] module is a
//! small multilayer perceptron with hand-written gradients that stands in for
//! a deep backbone; [`dataset`] generates or loads long-tailed embedding
//! datasets; [`evaluation`] provides the four-fold accuracy report, the
//! Oracle upper bound and the expert-collision analyses. [`pipeline`] wires
//! the pieces together for whole-benchmark runs.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod fsutil;
pub mod fusion;
pub mod network;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
