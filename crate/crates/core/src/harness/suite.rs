//! Synthetic mixed-task suites.
//!
//! Each latent task owns a random query-to-answer table. Demonstrations of
//! task `t` carry features `e_t + N(0, sigma^2)` (image and text parts drawn
//! independently) and answers flipped to a uniformly chosen wrong answer with
//! probability `epsilon`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dataset::Dataset;
use crate::backends::SyntheticTaskModel;
use crate::domain::{Demonstration, Query, TokenId};
use crate::error::{Error, Result};
use crate::numeric::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolAssignment {
    /// Demo `j` of task `t` asks symbol `(j + t) mod Q`; query `j` asks `j mod Q`.
    #[default]
    Stratified,
    /// Uniform draws.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSuiteSpec {
    pub tasks: usize,
    pub query_symbols: usize,
    pub answers: usize,
    pub epsilon: f64,
    pub demos_per_task: usize,
    pub queries_per_task: usize,
    pub sigma: f64,
    pub seed: u64,
    pub symbols: SymbolAssignment,
    /// Draw every query from this task instead of from all tasks.
    pub query_task: Option<usize>,
    pub tokens_per_demo: usize,
    pub tokens_per_query: usize,
}

impl Default for SyntheticSuiteSpec {
    fn default() -> Self {
        Self {
            tasks: 4,
            query_symbols: 8,
            answers: 4,
            epsilon: 0.1,
            demos_per_task: 8,
            queries_per_task: 8,
            sigma: 0.05,
            seed: 0,
            symbols: SymbolAssignment::Stratified,
            query_task: None,
            tokens_per_demo: SyntheticTaskModel::DEFAULT_TOKENS_PER_DEMO,
            tokens_per_query: SyntheticTaskModel::DEFAULT_TOKENS_PER_QUERY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub model: SyntheticTaskModel,
    pub dataset: Dataset,
}

impl SyntheticSuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.query_symbols == 0 || self.demos_per_task == 0 {
            return Err(Error::invalid(
                "tasks, query_symbols and demos_per_task must be positive",
            ));
        }
        if self.answers < 2 {
            return Err(Error::invalid("at least two answers are required"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        if let Some(t) = self.query_task {
            if t >= self.tasks {
                return Err(Error::invalid(format!("query_task {t} out of range")));
            }
        }
        Ok(())
    }
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSuiteSpec) -> Result<SyntheticSuite> {
    spec.validate()?;
    let (t_count, q_count, a_count) = (spec.tasks, spec.query_symbols, spec.answers);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tables: Vec<Vec<usize>> = (0..t_count)
        .map(|_| (0..q_count).map(|_| rng.random_range(0..a_count)).collect())
        .collect();
    let model = SyntheticTaskModel::new(q_count, a_count, tables.clone(), spec.epsilon)?
        .with_token_counts(spec.tokens_per_demo, spec.tokens_per_query)?;
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let feature = |rng: &mut ChaCha8Rng, task: usize| {
        let v = (0..t_count)
            .map(|i| f64::from(u8::from(i == task)) + noise.sample(rng))
            .collect();
        FeatureVector::new(v)
    };

    let mut demonstrations = Vec::new();
    for (t, table) in tables.iter().enumerate() {
        for j in 0..spec.demos_per_task {
            let q = match spec.symbols {
                SymbolAssignment::Stratified => (j + t) % q_count,
                SymbolAssignment::Random => rng.random_range(0..q_count),
            };
            let mut a = table[q];
            if rng.random::<f64>() < spec.epsilon {
                let wrong = rng.random_range(0..a_count - 1);
                a = if wrong >= a { wrong + 1 } else { wrong };
            }
            demonstrations.push(Demonstration {
                id: format!("t{t}-d{j}"),
                image_feature: Some(feature(&mut rng, t)?),
                text_feature: Some(feature(&mut rng, t)?),
                payload: json!({"query_symbol": q, "answer_symbol": a}),
                task: Some(t),
            });
        }
    }

    let query_tasks: Vec<usize> = match spec.query_task {
        Some(t) => vec![t],
        None => (0..t_count).collect(),
    };
    let mut queries = Vec::new();
    for &t in &query_tasks {
        for j in 0..spec.queries_per_task {
            let q = match spec.symbols {
                SymbolAssignment::Stratified => j % q_count,
                SymbolAssignment::Random => rng.random_range(0..q_count),
            };
            queries.push(Query {
                id: format!("t{t}-q{j}"),
                image_feature: Some(feature(&mut rng, t)?),
                text_feature: Some(feature(&mut rng, t)?),
                payload: json!({"query_symbol": q}),
                reference_answer: Some(vec![TokenId(tables[t][q])]),
                task: Some(t),
            });
        }
    }
    Ok(SyntheticSuite {
        model,
        dataset: Dataset {
            demonstrations,
            queries,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = SyntheticSuiteSpec {
            tasks: 2,
            demos_per_task: 4,
            ..SyntheticSuiteSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.dataset.demonstrations.len(), 8);
        assert_eq!(a.dataset.queries.len(), 16);
        assert_eq!(generate_synthetic(&spec).unwrap(), a);
        let other = generate_synthetic(&SyntheticSuiteSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other, a);
    }

    #[test]
    fn zero_noise_shares_features() {
        let spec = SyntheticSuiteSpec {
            sigma: 0.0,
            ..SyntheticSuiteSpec::default()
        };
        let suite = generate_synthetic(&spec).unwrap();
        for d in &suite.dataset.demonstrations {
            let t = d.task.unwrap();
            let expected: Vec<f64> = (0..spec.tasks).map(|i| if i == t { 1.0 } else { 0.0 }).collect();
            assert_eq!(d.image_feature.as_ref().unwrap().as_slice(), &expected[..]);
            assert_eq!(d.text_feature.as_ref().unwrap().as_slice(), &expected[..]);
        }
    }

    #[test]
    fn references_follow_tables() {
        let suite = generate_synthetic(&SyntheticSuiteSpec {
            query_task: Some(1),
            ..SyntheticSuiteSpec::default()
        })
        .unwrap();
        assert!(suite.dataset.queries.iter().all(|q| q.task == Some(1)));
        for q in &suite.dataset.queries {
            let sym = q.payload["query_symbol"].as_u64().unwrap() as usize;
            assert_eq!(q.reference_answer, Some(vec![TokenId(suite.model.answer_of(1, sym))]));
        }
    }

    #[test]
    fn label_noise_rate() {
        let suite = generate_synthetic(&SyntheticSuiteSpec {
            tasks: 2,
            demos_per_task: 2000,
            epsilon: 0.2,
            ..SyntheticSuiteSpec::default()
        })
        .unwrap();
        let flipped = suite
            .dataset
            .demonstrations
            .iter()
            .filter(|d| {
                let (q, a) = suite.model.demo_symbols(d).unwrap();
                suite.model.answer_of(d.task.unwrap(), q) != a
            })
            .count();
        let rate = flipped as f64 / 4000.0;
        assert!((rate - 0.2).abs() < 0.03, "{rate}");
    }
}
