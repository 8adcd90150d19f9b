//! Context compilation: per-chunk ensemble weights and the weighted logit
//! sum that realizes a product of chunk-wise experts.

use serde::{Deserialize, Serialize};

use crate::chunking::{build_feature, FeatureMode};
use crate::domain::{ChunkPlan, Demonstration, Query};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, softmax_slice, LogitVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Softmax over mean query-to-chunk cosine similarity.
    #[default]
    Similarity,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompilationConfig {
    pub weighting: Weighting,
    /// Divides similarities before the softmax. 1.0 leaves them untouched.
    pub temperature: f64,
    pub feature_mode: FeatureMode,
}

impl Default for CompilationConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::Similarity,
            temperature: 1.0,
            feature_mode: FeatureMode::Multimodal,
        }
    }
}

impl CompilationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Mean cosine similarity between the query and each chunk member.
pub fn chunk_similarity<S: Scalar>(query: &Query<S>, chunk: &[&Demonstration<S>], mode: FeatureMode) -> Result<S> {
    if chunk.is_empty() {
        return Err(Error::invalid("similarity to an empty chunk"));
    }
    let q = build_feature(query, mode, false)?;
    let mut total = S::zero();
    for d in chunk {
        total += cosine_similarity(&q, &build_feature(*d, mode, false)?)?;
    }
    Ok(total / S::from_usize(chunk.len()).unwrap())
}

/// Softmax over `similarities / temperature`.
pub fn similarity_weights<S: Scalar>(similarities: &[S], temperature: f64) -> Result<Vec<S>> {
    let t = S::lit(temperature);
    let scaled: Vec<S> = similarities.iter().map(|s| *s / t).collect();
    Ok(softmax_slice(&scaled)?.as_slice().to_vec())
}

/// Ensemble weights for `plan`, computed once per query before decoding.
pub fn compute_weights<S: Scalar>(
    query: &Query<S>,
    plan: &ChunkPlan<S>,
    demos: &[Demonstration<S>],
    cfg: &CompilationConfig,
) -> Result<Vec<S>> {
    cfg.validate()?;
    let k = plan.k();
    match cfg.weighting {
        Weighting::Uniform => Ok(vec![S::one() / S::from_usize(k).unwrap(); k]),
        Weighting::Similarity => {
            let sims = plan
                .select(demos)?
                .iter()
                .map(|chunk| chunk_similarity(query, chunk, cfg.feature_mode))
                .collect::<Result<Vec<_>>>()?;
            similarity_weights(&sims, cfg.temperature)
        }
    }
}

/// `sum_k w_k * l_k`, elementwise.
///
/// With a single chunk of weight one the input is returned bit-for-bit.
pub fn compile_logits<S: Scalar>(chunk_logits: &[LogitVector<S>], weights: &[S]) -> Result<LogitVector<S>> {
    let first = chunk_logits
        .first()
        .ok_or_else(|| Error::invalid("no chunk logits to compile"))?;
    if chunk_logits.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} logit vectors for {} weights",
            chunk_logits.len(),
            weights.len()
        )));
    }
    if let Some(bad) = chunk_logits.iter().find(|l| l.len() != first.len()) {
        return Err(Error::invalid(format!(
            "logit length mismatch: {} vs {}",
            bad.len(),
            first.len()
        )));
    }
    let mut out = vec![S::zero(); first.len()];
    for (logits, w) in chunk_logits.iter().zip(weights) {
        for (o, l) in out.iter_mut().zip(logits.as_slice()) {
            *o += *w * *l;
        }
    }
    LogitVector::new(out)
}
