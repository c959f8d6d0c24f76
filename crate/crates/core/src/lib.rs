//! Adaptive-bin monocular depth estimation.
//!
//! The model splits depth prediction into a classification and a regression
//! part: a query-based decoder generates per-image depth bins and bin
//! embeddings from a feature pyramid, per-pixel features are matched against
//! the bin embeddings to form a probability volume, and the final depth is
//! the probability-weighted combination of bin centers. Training supervises
//! every decoder layer at every scale, plus an auxiliary scene classification
//! task carried by an extra query.

pub mod autodiff;

mod error;

pub use error::{Error, Result};
