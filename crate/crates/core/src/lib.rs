//! Empirical Bayes testing of normal means with unknown, heteroscedastic
//! variances.
//!
//! Each unit contributes a summary pair `(Z_i, S_i²)`: an estimate of its
//! mean and an independent sample variance on `ν` degrees of freedom. A
//! prior on the variances is estimated by nonparametric maximum likelihood
//! from the `S_i²` alone, and each mean is tested with a p-value that is
//! exact conditional on `S_i²` under the estimated prior.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cli;
pub mod dist;
pub mod error;
pub mod mtp;
pub mod npmle;
pub mod pvalues;
pub mod simbench;
pub mod quad;
pub mod summarize;

pub use error::{Error, Result};
