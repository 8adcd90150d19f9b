//! Domain records: tokens, demonstrations, queries and chunk plans.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::FeatureVector;
use crate::scalar::Scalar;

/// Index into a backend-defined [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("vocabulary size {size} < 2")));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut v = Self::new(labels.len())?;
        v.labels = Some(labels);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self, token: TokenId) -> Option<&str> {
        self.labels.as_ref()?.get(token.0).map(String::as_str)
    }

    pub fn token(&self, id: usize) -> Result<TokenId> {
        if id >= self.size {
            return Err(Error::invalid(format!(
                "token {id} out of range for vocabulary of {}",
                self.size
            )));
        }
        Ok(TokenId(id))
    }
}

/// Backend-opaque structured record. The synthetic backend reads
/// `query_symbol` / `answer_symbol`; remote backends forward it verbatim.
pub type Payload = serde_json::Value;

/// One in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Demonstration<S: Scalar = f64> {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<FeatureVector<S>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_feature: Option<FeatureVector<S>>,
    pub payload: Payload,
    /// Generating task, for diagnostics only. Nothing in the engine reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Query<S: Scalar = f64> {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<FeatureVector<S>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_feature: Option<FeatureVector<S>>,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
}

/// Anything carrying the two feature parts.
pub trait Featured<S: Scalar> {
    fn id(&self) -> &str;
    fn image_feature(&self) -> Option<&FeatureVector<S>>;
    fn text_feature(&self) -> Option<&FeatureVector<S>>;
}

impl<S: Scalar> Featured<S> for Demonstration<S> {
    fn id(&self) -> &str {
        &self.id
    }
    fn image_feature(&self) -> Option<&FeatureVector<S>> {
        self.image_feature.as_ref()
    }
    fn text_feature(&self) -> Option<&FeatureVector<S>> {
        self.text_feature.as_ref()
    }
}

impl<S: Scalar> Featured<S> for Query<S> {
    fn id(&self) -> &str {
        &self.id
    }
    fn image_feature(&self) -> Option<&FeatureVector<S>> {
        self.image_feature.as_ref()
    }
    fn text_feature(&self) -> Option<&FeatureVector<S>> {
        self.text_feature.as_ref()
    }
}

/// A disjoint, exhaustive partition of demonstrations into `K` non-empty
/// chunks, optionally carrying one ensemble weight per chunk.
///
/// The assignment is stored positionally: `assignment[i]` is the chunk of the
/// `i`-th demonstration in the order the plan was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ChunkPlan<S: Scalar = f64> {
    ids: Vec<String>,
    assignment: Vec<usize>,
    k: usize,
    weights: Option<Vec<S>>,
}

impl<S: Scalar> ChunkPlan<S> {
    /// Builds a plan from a positional assignment. Chunk labels are
    /// canonicalized by first appearance so equal partitions compare equal.
    pub fn from_assignment(ids: Vec<String>, assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("chunk count must be positive"));
        }
        if ids.len() != assignment.len() {
            return Err(Error::invalid(format!(
                "{} ids but {} assignments",
                ids.len(),
                assignment.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate demonstration id {id:?}")));
            }
        }
        if let Some(bad) = assignment.iter().find(|c| **c >= k) {
            return Err(Error::invalid(format!("chunk index {bad} >= K={k}")));
        }
        let mut relabel = vec![usize::MAX; k];
        let mut next = 0;
        let assignment = assignment
            .into_iter()
            .map(|c| {
                if relabel[c] == usize::MAX {
                    relabel[c] = next;
                    next += 1;
                }
                relabel[c]
            })
            .collect();
        if next != k {
            return Err(Error::invalid(format!("{} of {k} chunks are empty", k - next)));
        }
        Ok(Self {
            ids,
            assignment,
            k,
            weights: None,
        })
    }

    /// Builds a plan from explicit chunk membership lists, checking that the
    /// chunks are disjoint and cover exactly `ids`.
    pub fn from_chunks(ids: &[String], chunks: &[Vec<String>]) -> Result<Self> {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut assignment = vec![usize::MAX; ids.len()];
        for (k, chunk) in chunks.iter().enumerate() {
            for id in chunk {
                let &i = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::invalid(format!("unknown demonstration {id:?}")))?;
                if assignment[i] != usize::MAX {
                    return Err(Error::invalid(format!("demonstration {id:?} in two chunks")));
                }
                assignment[i] = k;
            }
        }
        if let Some(i) = assignment.iter().position(|a| *a == usize::MAX) {
            return Err(Error::invalid(format!(
                "demonstration {:?} not assigned to any chunk",
                ids[i]
            )));
        }
        Self::from_assignment(ids.to_vec(), assignment, chunks.len())
    }

    /// Single chunk holding everything.
    pub fn trivial(ids: Vec<String>) -> Result<Self> {
        let n = ids.len();
        let mut plan = Self::from_assignment(ids, vec![0; n], 1)?;
        plan.weights = Some(vec![S::one()]);
        Ok(plan)
    }

    /// Attaches ensemble weights: one per chunk, each positive, summing to 1.
    pub fn with_weights(mut self, weights: Vec<S>) -> Result<Self> {
        if weights.len() != self.k {
            return Err(Error::invalid(format!(
                "{} weights for {} chunks",
                weights.len(),
                self.k
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= S::zero()) {
            return Err(Error::invalid("chunk weights must be positive"));
        }
        let total: S = weights.iter().copied().sum();
        if (total.as_f64() - 1.0).abs() > S::SUM_TOLERANCE {
            return Err(Error::invalid(format!("chunk weights sum to {total}")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn weights(&self) -> Option<&[S]> {
        self.weights.as_deref()
    }

    pub fn chunk_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.assignment[i])
    }

    /// Positional member indices of every chunk, each in original order.
    pub fn chunks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, c) in self.assignment.iter().enumerate() {
            out[*c].push(i);
        }
        out
    }

    /// Chunk member ids, each chunk in original order.
    pub fn chunk_ids(&self) -> Vec<Vec<&str>> {
        self.chunks()
            .into_iter()
            .map(|c| c.into_iter().map(|i| self.ids[i].as_str()).collect())
            .collect()
    }

    /// Resolves the plan against `demos`, which must list the same ids in
    /// the same order the plan was built from.
    pub fn select<'a>(&self, demos: &'a [Demonstration<S>]) -> Result<Vec<Vec<&'a Demonstration<S>>>> {
        if demos.len() != self.ids.len() || demos.iter().zip(&self.ids).any(|(d, id)| d.id != *id) {
            return Err(Error::invalid("chunk plan does not match the demonstration list"));
        }
        Ok(self
            .chunks()
            .into_iter()
            .map(|c| c.into_iter().map(|i| &demos[i]).collect())
            .collect())
    }
}

/// Ids of a demonstration slice, in order.
pub fn demo_ids<S: Scalar>(demos: &[Demonstration<S>]) -> Vec<String> {
    demos.iter().map(|d| d.id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn vocabulary_bounds() {
        assert!(Vocabulary::new(1).is_err());
        let v = Vocabulary::new(3).unwrap();
        assert!(v.token(2).is_ok());
        assert!(v.token(3).is_err());
        let v = Vocabulary::with_labels(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.label(TokenId(1)), Some("b"));
    }

    #[test]
    fn assignment_relabels_canonically() {
        let a = ChunkPlan::<f64>::from_assignment(ids(4), vec![1, 1, 0, 0], 2).unwrap();
        let b = ChunkPlan::<f64>::from_assignment(ids(4), vec![0, 0, 1, 1], 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.chunk_ids(), vec![vec!["d0", "d1"], vec!["d2", "d3"]]);
    }

    #[test]
    fn empty_chunk_rejected() {
        assert!(ChunkPlan::<f64>::from_assignment(ids(3), vec![0, 0, 0], 2).is_err());
        assert!(ChunkPlan::<f64>::from_assignment(ids(3), vec![0, 2, 0], 2).is_err());
    }

    #[test]
    fn overlapping_or_partial_chunks_rejected() {
        let all = ids(3);
        let overlap = vec![vec!["d0".into(), "d1".into()], vec!["d1".into(), "d2".into()]];
        assert!(ChunkPlan::<f64>::from_chunks(&all, &overlap).is_err());
        let partial = vec![vec!["d0".into()], vec!["d1".into()]];
        assert!(ChunkPlan::<f64>::from_chunks(&all, &partial).is_err());
        let foreign = vec![vec!["d0".into(), "d1".into(), "d2".into(), "x".into()]];
        assert!(ChunkPlan::<f64>::from_chunks(&all, &foreign).is_err());
        let ok = vec![vec!["d2".into()], vec!["d0".into(), "d1".into()]];
        let plan = ChunkPlan::<f64>::from_chunks(&all, &ok).unwrap();
        assert_eq!(plan.k(), 2);
        assert_eq!(plan.chunk_of("d2"), Some(1));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(ChunkPlan::<f64>::from_assignment(dup, vec![0, 0], 1).is_err());
    }

    #[test]
    fn weights_validated() {
        let plan = ChunkPlan::<f64>::from_assignment(ids(2), vec![0, 1], 2).unwrap();
        assert!(plan.clone().with_weights(vec![0.5]).is_err());
        assert!(plan.clone().with_weights(vec![1.0, 0.0]).is_err());
        assert!(plan.clone().with_weights(vec![0.6, 0.6]).is_err());
        assert!(plan.with_weights(vec![0.25, 0.75]).is_ok());
    }
}
