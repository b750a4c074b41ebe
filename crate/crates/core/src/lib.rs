//! Learned translation between heterogeneous local feature descriptor spaces.
//!
//! - [`descriptor`]: descriptor families, matrices, distances, binarization
//! - [`xdsc`]: the XDSC descriptor file format
//! - [`mlp`]: the feed-forward engine (forward, exact backward, Adam, XMLP)
//! - [`losses`]: translation and hardest-negative triplet losses
//! - [`pair`] and [`bank`]: pair translators and the encoder-decoder bank
//! - [`matching`]: exhaustive matchers and metrics
//! - [`scenarios`]: match graphs, tracks, co-visibility
//! - [`synthetic`]: seeded descriptor families with known correspondences

pub mod bank;
pub mod descriptor;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod mlp;
pub mod pair;
pub mod scalar;
pub mod scenarios;
pub mod synthetic;
pub mod train;
pub mod xdsc;

pub use descriptor::{AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix, Domain, Metric, OutputNorm};
pub use error::{Error, Result};
