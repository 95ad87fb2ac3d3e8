//! Span-grounded response generation for multi-reference knowledge-grounded
//! dialogue.
//!
//! A prior reader scores start/end positions over the knowledge text given
//! the dialogue context; a posterior reader does the same with the observed
//! response in view. Spans sampled from these distributions condition an
//! autoregressive generator. Training alternates a discriminator ("sleep")
//! step over observed and generated responses with a discriminator-weighted
//! variational ("wake") step.

pub mod corpus;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod neural;
pub mod span_model;
pub mod training;

pub use error::{Error, Result};
pub use span_model::{Span, SpanDistribution};
