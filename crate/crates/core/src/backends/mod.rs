//! Logit providers.
//!
//! A [`LogitProvider`] turns a [`ContextRequest`] (demonstrations, query and
//! the output so far) into next-token logits. Three implementations ship
//! here: the exactly solvable [`SyntheticTaskModel`], the [`Metered`]
//! wrapper that attaches a latency [`CostModel`], and the HTTP
//! [`RemoteClient`].

mod cost;
mod remote;
mod synthetic;

pub use cost::{
    lpt_makespan, CostModel, LatencyBreakdown, PrefillFit, MEASURED_DECODE, MEASURED_DECODE_STEPS, MEASURED_PREFILL,
};
pub use remote::{Handshake, LogitsRequest, LogitsResponse, RemoteClient, RemoteConfig, WireDemonstration, WireQuery};
pub use synthetic::{SyntheticTaskModel, EOS_MASS};

use crate::domain::{Demonstration, Query, TokenId, Vocabulary};
use crate::error::Result;
use crate::numeric::LogitVector;
use crate::scalar::Scalar;

/// The conditioning context for one next-token evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ContextRequest<'a, S: Scalar = f64> {
    /// May be empty (zero-shot).
    pub demonstrations: &'a [&'a Demonstration<S>],
    pub query: &'a Query<S>,
    pub partial_output: &'a [TokenId],
}

/// How a provider may be driven by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    /// `score` may be called from many workers at once.
    ConcurrentSafe,
    /// The engine serializes calls.
    Exclusive,
}

pub trait LogitProvider<S: Scalar = f64>: Send + Sync {
    /// Next-token logits. Must be deterministic in `request`.
    fn score(&self, request: &ContextRequest<'_, S>) -> Result<LogitVector<S>>;

    fn vocabulary(&self) -> &Vocabulary;

    /// Context length of `request` in backend tokens.
    fn token_count(&self, request: &ContextRequest<'_, S>) -> Result<usize>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Exclusive
    }

    /// Cost model used to charge simulated latency, if any.
    fn cost_model(&self) -> Option<&CostModel> {
        None
    }
}

impl<S: Scalar, P: LogitProvider<S> + ?Sized> LogitProvider<S> for &P {
    fn score(&self, request: &ContextRequest<'_, S>) -> Result<LogitVector<S>> {
        (**self).score(request)
    }
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn token_count(&self, request: &ContextRequest<'_, S>) -> Result<usize> {
        (**self).token_count(request)
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn cost_model(&self) -> Option<&CostModel> {
        (**self).cost_model()
    }
}

impl<S: Scalar, P: LogitProvider<S> + ?Sized> LogitProvider<S> for Box<P> {
    fn score(&self, request: &ContextRequest<'_, S>) -> Result<LogitVector<S>> {
        (**self).score(request)
    }
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn token_count(&self, request: &ContextRequest<'_, S>) -> Result<usize> {
        (**self).token_count(request)
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn cost_model(&self) -> Option<&CostModel> {
        (**self).cost_model()
    }
}

/// Wraps a provider and charges simulated latency through a [`CostModel`].
#[derive(Debug, Clone)]
pub struct Metered<P> {
    inner: P,
    model: CostModel,
}

impl<P> Metered<P> {
    pub fn new(inner: P, model: CostModel) -> Result<Self> {
        model.validate()?;
        Ok(Self { inner, model })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<S: Scalar, P: LogitProvider<S>> LogitProvider<S> for Metered<P> {
    fn score(&self, request: &ContextRequest<'_, S>) -> Result<LogitVector<S>> {
        self.inner.score(request)
    }
    fn vocabulary(&self) -> &Vocabulary {
        self.inner.vocabulary()
    }
    fn token_count(&self, request: &ContextRequest<'_, S>) -> Result<usize> {
        self.inner.token_count(request)
    }
    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }
    fn cost_model(&self) -> Option<&CostModel> {
        Some(&self.model)
    }
}
