//! Vectors over the vocabulary and feature space, plus the numeric primitives
//! that operate on them: softmax, clamped KL divergence and cosine similarity.
//!
//! Every vector type validates its invariant on construction, so downstream
//! code can assume finite logits and normalized probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to both distributions before evaluating KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// One finite real per vocabulary entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LogitVector<S: Scalar = f64>(Vec<S>);

impl<S: Scalar> LogitVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }
}

impl<'de, S: Scalar> Deserialize<'de> for LogitVector<S> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<S>::deserialize(d)?;
        Self::new(v).map_err(serde::de::Error::custom)
    }
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbabilityVector<S: Scalar = f64>(Vec<S>);

impl<S: Scalar> ProbabilityVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || *v < S::zero() || *v > S::one())
        {
            return Err(Error::invalid(format!("probability {i} outside [0, 1]")));
        }
        let total: S = values.iter().copied().sum();
        if (total.as_f64() - 1.0).abs() > S::SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total-variation distance, `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &Self) -> Result<S> {
        check_same_len(self.len(), other.len())?;
        let half = S::lit(0.5);
        Ok(half * self.0.iter().zip(&other.0).map(|(a, b)| (*a - *b).abs()).sum::<S>())
    }
}

impl<'de, S: Scalar> Deserialize<'de> for ProbabilityVector<S> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<S>::deserialize(d)?;
        Self::new(v).map_err(serde::de::Error::custom)
    }
}

/// A dataset-provided embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FeatureVector<S: Scalar = f64>(Vec<S>);

impl<S: Scalar> FeatureVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("feature vector has dimension 0"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("feature component {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> S {
        self.0.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        check_same_len(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| *a * *b).sum())
    }

    /// `[self ‖ other]`
    pub fn concat(&self, other: &Self) -> Self {
        let mut v = Vec::with_capacity(self.dim() + other.dim());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&other.0);
        Self(v)
    }

    /// Scales to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == S::zero() {
            return Err(Error::Degenerate("cannot normalize a zero vector".into()));
        }
        Ok(Self(self.0.iter().map(|v| *v / n).collect()))
    }

    pub fn squared_distance(&self, other: &[S]) -> S {
        squared_distance(&self.0, other)
    }
}

impl<'de, S: Scalar> Deserialize<'de> for FeatureVector<S> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<S>::deserialize(d)?;
        Self::new(v).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x - *y;
            d * d
        })
        .sum()
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Numerically stable softmax: `exp(l - max l) / sum exp(l - max l)`.
pub fn softmax<S: Scalar>(logits: &LogitVector<S>) -> Result<ProbabilityVector<S>> {
    softmax_slice(logits.as_slice())
}

pub(crate) fn softmax_slice<S: Scalar>(values: &[S]) -> Result<ProbabilityVector<S>> {
    if values.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input is not finite"));
    }
    let max = values.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<S> = values.iter().map(|v| (*v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    ProbabilityVector::new(exps.into_iter().map(|e| e / total).collect())
}

/// KL(p ‖ q) in nats. Both inputs are clamped to [`KL_FLOOR`] and
/// renormalized first, so the result is finite for near-deterministic
/// distributions.
pub fn kl_divergence<S: Scalar>(p: &ProbabilityVector<S>, q: &ProbabilityVector<S>) -> Result<S> {
    check_same_len(p.len(), q.len())?;
    let p = clamp_renormalize(p.as_slice());
    let q = clamp_renormalize(q.as_slice());
    Ok(p.iter().zip(&q).map(|(a, b)| *a * (*a / *b).ln()).sum())
}

fn clamp_renormalize<S: Scalar>(values: &[S]) -> Vec<S> {
    let floor = S::lit(KL_FLOOR);
    let clamped: Vec<S> = values.iter().map(|v| v.max(floor)).collect();
    let total: S = clamped.iter().copied().sum();
    clamped.into_iter().map(|v| v / total).collect()
}

/// `<a, b> / (|a| |b|)`, clamped into [-1, 1].
pub fn cosine_similarity<S: Scalar>(a: &FeatureVector<S>, b: &FeatureVector<S>) -> Result<S> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == S::zero() || nb == S::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).max(-S::one()).min(S::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn probs(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn feat(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&logits(&[0.0, 0.0])).unwrap().as_slice(), &[0.5, 0.5]);
        for c in [-1e3, -2.5, 0.0, 7.0, 1e3] {
            let p = softmax(&logits(&[c, c, c])).unwrap();
            for v in p.as_slice() {
                assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
        let p = softmax(&logits(&[1f64.ln(), 3f64.ln()])).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(
            LogitVector::new(vec![0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax_slice(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_f32() {
        let p = softmax(&LogitVector::<f32>::new(vec![1f32.ln(), 3f32.ln()]).unwrap()).unwrap();
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&probs(&[0.5, 0.5]), &probs(&[0.5, 0.5])).unwrap(), 0.0);
        let d = kl_divergence(&probs(&[1.0, 0.0]), &probs(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-12);
        // 0.75 ln 1.5 + 0.25 ln 0.5
        let d = kl_divergence(&probs(&[0.75, 0.25]), &probs(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(d, 0.130812, epsilon = 1e-5);
    }

    #[test]
    fn kl_length_mismatch() {
        let r = kl_divergence(&probs(&[0.5, 0.5]), &probs(&[0.2, 0.3, 0.5]));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kl_finite_against_zero_mass() {
        let d = kl_divergence(&probs(&[1.0, 0.0]), &probs(&[0.0, 1.0])).unwrap();
        assert!(d.is_finite() && d > 20.0);
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&feat(&[1.0, 0.0]), &feat(&[1.0, 0.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(cosine_similarity(&feat(&[1.0, 0.0]), &feat(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&feat(&[1.0, 1.0]), &feat(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(c, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn cosine_zero_norm() {
        let r = cosine_similarity(&feat(&[0.0, 0.0]), &feat(&[1.0, 0.0]));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(vec![0.5, 0.5 + 1e-10]).is_ok());
    }

    fn distribution(len: usize) -> impl Strategy<Value = ProbabilityVector> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("non-zero mass", |v| {
            let t: f64 = v.iter().sum();
            (t > 1e-6).then(|| probs(&v.iter().map(|x| x / t).collect::<Vec<_>>()))
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 2..64), c in -50.0f64..50.0) {
            let a = softmax(&logits(&v)).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&logits(&shifted)).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let total: f64 = a.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn kl_self_zero_and_gibbs((p, q) in (2usize..32).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }
}
