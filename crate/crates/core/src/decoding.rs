//! Greedy decode loops: chunk-parallel with per-step logit compilation, and
//! the single-context baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Concurrency, ContextRequest, LatencyBreakdown, LogitProvider};
use crate::compilation::compile_logits;
use crate::domain::{ChunkPlan, Demonstration, Query, TokenId};
use crate::error::{Error, Result};
use crate::numeric::{softmax, LogitVector, ProbabilityVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Stops generation; never part of the output. `None` decodes to the limit.
    pub eos_token: Option<TokenId>,
    pub strategy: DecodeStrategy,
    /// Keep per-step distributions and logits in the trace.
    pub record_trace: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 1024,
            eos_token: None,
            strategy: DecodeStrategy::Greedy,
            record_trace: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DecodeStep<S: Scalar = f64> {
    pub token: TokenId,
    /// Simulated cost charged to this step; the first step carries the prefill.
    pub step_cost: f64,
    /// One per chunk, empty unless the trace is recorded.
    pub chunk_distributions: Vec<ProbabilityVector<S>>,
    pub compiled_logits: Option<LogitVector<S>>,
    pub compiled_distribution: Option<ProbabilityVector<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DecodeTrace<S: Scalar = f64> {
    pub query_id: String,
    /// `None` for a full-context pass (which may have no demonstrations).
    pub plan: Option<ChunkPlan<S>>,
    pub weights: Vec<S>,
    /// Context length of each chunk at step 0.
    pub prefill_lengths: Vec<usize>,
    pub steps: Vec<DecodeStep<S>>,
    /// Present when the provider carries a cost model.
    pub latency: Option<LatencyBreakdown>,
}

impl<S: Scalar> DecodeTrace<S> {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Argmax, ties toward the lowest id.
pub fn greedy_select<S: Scalar>(p: &ProbabilityVector<S>) -> TokenId {
    let mut best = 0;
    for (i, v) in p.as_slice().iter().enumerate() {
        if *v > p.as_slice()[best] {
            best = i;
        }
    }
    TokenId(best)
}

/// Decodes with one context per chunk of `plan`, fusing chunk logits with
/// the plan's weights at every step.
pub fn decode_parallel<S, P>(
    provider: &P,
    demos: &[Demonstration<S>],
    query: &Query<S>,
    plan: &ChunkPlan<S>,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace<S>)>
where
    S: Scalar,
    P: LogitProvider<S> + ?Sized,
{
    let weights = plan
        .weights()
        .ok_or_else(|| Error::invalid("chunk plan carries no weights"))?
        .to_vec();
    let chunks = plan.select(demos)?;
    decode_loop(provider, &chunks, &weights, query, cfg, Some(plan.clone()))
}

/// Decodes with every demonstration in a single context.
pub fn decode_full_context<S, P>(
    provider: &P,
    demos: &[Demonstration<S>],
    query: &Query<S>,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace<S>)>
where
    S: Scalar,
    P: LogitProvider<S> + ?Sized,
{
    let all: Vec<&Demonstration<S>> = demos.iter().collect();
    decode_loop(provider, &[all], &[S::one()], query, cfg, None)
}

fn decode_loop<S, P>(
    provider: &P,
    chunks: &[Vec<&Demonstration<S>>],
    weights: &[S],
    query: &Query<S>,
    cfg: &DecodeConfig,
    plan: Option<ChunkPlan<S>>,
) -> Result<(Vec<TokenId>, DecodeTrace<S>)>
where
    S: Scalar,
    P: LogitProvider<S> + ?Sized,
{
    cfg.validate()?;
    let vocab = provider.vocabulary().size();
    if let Some(eos) = cfg.eos_token {
        if eos.0 >= vocab {
            return Err(Error::invalid(format!(
                "eos token {} outside vocabulary of size {vocab}",
                eos.0
            )));
        }
    }
    let parallel = chunks.len() > 1 && provider.concurrency() == Concurrency::ConcurrentSafe;
    let cost = provider.cost_model();

    let mut output: Vec<TokenId> = Vec::new();
    let mut steps = Vec::new();
    let mut prefill_lengths = Vec::new();
    for step in 0..cfg.max_new_tokens {
        let score = |chunk: &Vec<&Demonstration<S>>| {
            let req = ContextRequest {
                demonstrations: chunk,
                query,
                partial_output: &output,
            };
            let logits = provider.score(&req)?;
            if logits.len() != vocab {
                return Err(Error::Protocol(format!(
                    "provider returned {} logits for a vocabulary of {vocab}",
                    logits.len()
                )));
            }
            Ok(logits)
        };
        let chunk_logits: Vec<LogitVector<S>> = if parallel {
            chunks.par_iter().map(score).collect::<Result<_>>()
        } else {
            chunks.iter().map(score).collect::<Result<_>>()
        }
        .map_err(|e| e.at_step(step))?;

        let compiled = compile_logits(&chunk_logits, weights).map_err(|e| e.at_step(step))?;
        let dist = softmax(&compiled).map_err(|e| e.at_step(step))?;
        let token = greedy_select(&dist);

        let mut step_cost = 0.0;
        if let Some(cm) = cost {
            if step == 0 {
                prefill_lengths = chunks
                    .iter()
                    .map(|chunk| {
                        provider.token_count(&ContextRequest {
                            demonstrations: chunk,
                            query,
                            partial_output: &[],
                        })
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| e.at_step(step))?;
                step_cost += cm.prefill_latency(&prefill_lengths);
            }
            step_cost += cm.decode_step_cost(&prefill_lengths);
        }

        let (chunk_distributions, compiled_logits, compiled_distribution) = if cfg.record_trace {
            let per_chunk = chunk_logits
                .iter()
                .map(softmax)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at_step(step))?;
            (per_chunk, Some(compiled), Some(dist))
        } else {
            (Vec::new(), None, None)
        };
        steps.push(DecodeStep {
            token,
            step_cost,
            chunk_distributions,
            compiled_logits,
            compiled_distribution,
        });
        if Some(token) == cfg.eos_token {
            break;
        }
        output.push(token);
    }

    let latency = match cost {
        Some(cm) => Some(cm.simulate_latency(&prefill_lengths, steps.len())?),
        None => None,
    };
    let trace = DecodeTrace {
        query_id: query.id.clone(),
        plan,
        weights: weights.to_vec(),
        prefill_lengths,
        steps,
        latency,
    };
    Ok((output, trace))
}
