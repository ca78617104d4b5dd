//! Shapley-guided dimension pooling and Kronecker late fusion for
//! multi-stain bag classification.
//!
//! The crate covers the full desk-scale pipeline: synthetic multimodal
//! cohort generation, gated-attention multiple-instance networks,
//! CART-style random forests, exact and fast tree Shapley attribution,
//! attribution-driven dimension pooling, and Kronecker-product late
//! fusion with evaluation metrics. The `pipeline` module wires the
//! stages into a resumable, seed-disciplined CLI.

pub mod attribution;
pub mod data;
pub mod error;
pub mod forest;
pub mod fusion;
pub mod metrics;
pub mod mil;
pub mod pipeline;
pub mod pool;
pub mod seeding;

pub use error::{Error, Result};
