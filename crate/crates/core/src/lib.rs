//! Streaming reconstruction of continuous spatiotemporal fields from sparse,
//! irregular observations.
//!
//! Each incoming observation set is aggregated by a learned-query attention
//! encoder, folded into a HiPPO-LegS state-space recurrence, and decoded at
//! arbitrary continuous coordinates by a functional-tensor FiLM decoder.

pub(crate) mod codec;
pub mod decoder;
pub mod diffarray;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fields;
pub mod model;
pub mod nn;
pub mod rng;
pub mod ssm;
pub mod train;

pub use error::{Error, FormatError, Result};
