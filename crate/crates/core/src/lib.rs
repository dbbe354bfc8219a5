//! Dynamic grained encoder for vision transformers.
//!
//! A router splits each layer's token grid into square regions and picks,
//! per region, how coarsely to pool tokens into queries. Only the pooled
//! queries go through attention (against dense keys and values); the
//! results are broadcast back to full resolution and added to the input.
//! Training uses Gumbel-max sampling with straight-through gradients and a
//! loss that steers the realized compute ratio toward a budget.

pub mod analysis;
pub mod budget;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod router;
pub mod tensor;

pub use error::{DgeError, Result};
