//! Chunk-parallel in-context learning.
//!
//! Demonstrations are partitioned into `K` chunks ([`chunking`]), each chunk
//! is scored as its own context by a [`backends::LogitProvider`], and the
//! chunk logits are fused every decode step as a weighted sum
//! ([`compilation`]) before greedy selection ([`decoding`]). [`metrics`]
//! holds the diversity/relevance diagnostics and run reports; [`harness`]
//! drives whole experiments.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar type.

pub mod backends;
pub mod chunking;
pub mod compilation;
pub mod decoding;
pub mod domain;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numeric;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Logits = numeric::LogitVector<f64>;
pub type Probabilities = numeric::ProbabilityVector<f64>;
pub type Features = numeric::FeatureVector<f64>;
pub type Demo = domain::Demonstration<f64>;
pub type QueryF64 = domain::Query<f64>;
pub type Plan = domain::ChunkPlan<f64>;
pub type Trace = decoding::DecodeTrace<f64>;

pub type Logits32 = numeric::LogitVector<f32>;
pub type Probabilities32 = numeric::ProbabilityVector<f32>;
pub type Features32 = numeric::FeatureVector<f32>;
pub type Demo32 = domain::Demonstration<f32>;
pub type Query32 = domain::Query<f32>;
pub type Plan32 = domain::ChunkPlan<f32>;
pub type Trace32 = decoding::DecodeTrace<f32>;
