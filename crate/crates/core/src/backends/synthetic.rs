//! A latent-task model whose posterior predictive is exactly computable.
//!
//! There are `T` tasks, each a total map from query symbols to answer
//! symbols. A demonstration `(q, a)` has likelihood `1 - eps` under task `t`
//! when `table_t(q) = a` and `eps / (A - 1)` otherwise. With a uniform task
//! prior the posterior and predictive follow from Bayes' rule.
//!
//! The vocabulary is the `A` answer symbols followed by end-of-sequence.
//! Answers are single tokens: at the first step the answers share
//! `1 - EOS_MASS` (end-of-sequence gets `EOS_MASS`), and once any token has
//! been emitted end-of-sequence gets `1 - EOS_MASS` while the answers share
//! the remainder in proportion to the predictive.

use serde::{Deserialize, Serialize};

use super::{Concurrency, ContextRequest, LogitProvider};
use crate::domain::{Demonstration, Payload, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numeric::LogitVector;
use crate::scalar::Scalar;

pub const EOS_MASS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SyntheticTaskModelRepr", into = "SyntheticTaskModelRepr")]
pub struct SyntheticTaskModel {
    num_query_symbols: usize,
    num_answers: usize,
    task_tables: Vec<Vec<usize>>,
    epsilon: f64,
    tokens_per_demo: usize,
    tokens_per_query: usize,
    vocabulary: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct SyntheticTaskModelRepr {
    num_query_symbols: usize,
    num_answers: usize,
    task_tables: Vec<Vec<usize>>,
    epsilon: f64,
    #[serde(default = "default_tokens_per_demo")]
    tokens_per_demo: usize,
    #[serde(default = "default_tokens_per_query")]
    tokens_per_query: usize,
}

fn default_tokens_per_demo() -> usize {
    SyntheticTaskModel::DEFAULT_TOKENS_PER_DEMO
}

fn default_tokens_per_query() -> usize {
    SyntheticTaskModel::DEFAULT_TOKENS_PER_QUERY
}

impl TryFrom<SyntheticTaskModelRepr> for SyntheticTaskModel {
    type Error = Error;
    fn try_from(r: SyntheticTaskModelRepr) -> Result<Self> {
        let mut m = Self::new(r.num_query_symbols, r.num_answers, r.task_tables, r.epsilon)?;
        m.tokens_per_demo = r.tokens_per_demo;
        m.tokens_per_query = r.tokens_per_query;
        m.validate_tokens()?;
        Ok(m)
    }
}

impl From<SyntheticTaskModel> for SyntheticTaskModelRepr {
    fn from(m: SyntheticTaskModel) -> Self {
        Self {
            num_query_symbols: m.num_query_symbols,
            num_answers: m.num_answers,
            task_tables: m.task_tables,
            epsilon: m.epsilon,
            tokens_per_demo: m.tokens_per_demo,
            tokens_per_query: m.tokens_per_query,
        }
    }
}

impl SyntheticTaskModel {
    /// Calibrated against the context lengths observed for 7B-class
    /// vision-language models with image demonstrations.
    pub const DEFAULT_TOKENS_PER_DEMO: usize = 2600;
    pub const DEFAULT_TOKENS_PER_QUERY: usize = 2557;

    pub fn new(
        num_query_symbols: usize,
        num_answers: usize,
        task_tables: Vec<Vec<usize>>,
        epsilon: f64,
    ) -> Result<Self> {
        if task_tables.is_empty() {
            return Err(Error::invalid("at least one task is required"));
        }
        if num_query_symbols == 0 {
            return Err(Error::invalid("at least one query symbol is required"));
        }
        if num_answers < 2 {
            return Err(Error::invalid("at least two answer symbols are required"));
        }
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 0.5)")));
        }
        for (t, table) in task_tables.iter().enumerate() {
            if table.len() != num_query_symbols {
                return Err(Error::invalid(format!(
                    "task {t} maps {} query symbols, expected {num_query_symbols}",
                    table.len()
                )));
            }
            if let Some(a) = table.iter().find(|a| **a >= num_answers) {
                return Err(Error::invalid(format!("task {t} maps to unknown answer {a}")));
            }
        }
        Ok(Self {
            num_query_symbols,
            num_answers,
            task_tables,
            epsilon,
            tokens_per_demo: Self::DEFAULT_TOKENS_PER_DEMO,
            tokens_per_query: Self::DEFAULT_TOKENS_PER_QUERY,
            vocabulary: Vocabulary::new(num_answers + 1)?,
        })
    }

    pub fn with_token_counts(mut self, per_demo: usize, per_query: usize) -> Result<Self> {
        self.tokens_per_demo = per_demo;
        self.tokens_per_query = per_query;
        self.validate_tokens()?;
        Ok(self)
    }

    fn validate_tokens(&self) -> Result<()> {
        if self.tokens_per_demo == 0 || self.tokens_per_query == 0 {
            return Err(Error::invalid("token counts must be positive"));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_tables.len()
    }

    pub fn num_query_symbols(&self) -> usize {
        self.num_query_symbols
    }

    pub fn num_answers(&self) -> usize {
        self.num_answers
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn task_tables(&self) -> &[Vec<usize>] {
        &self.task_tables
    }

    pub fn tokens_per_demo(&self) -> usize {
        self.tokens_per_demo
    }

    pub fn tokens_per_query(&self) -> usize {
        self.tokens_per_query
    }

    pub fn eos(&self) -> TokenId {
        TokenId(self.num_answers)
    }

    pub fn answer_of(&self, task: usize, query_symbol: usize) -> usize {
        self.task_tables[task][query_symbol]
    }

    fn likelihood(&self, task: usize, query_symbol: usize, answer: usize) -> f64 {
        if self.task_tables[task][query_symbol] == answer {
            1.0 - self.epsilon
        } else {
            self.epsilon / (self.num_answers - 1) as f64
        }
    }

    fn symbol(&self, payload: &Payload, field: &str, bound: usize) -> Result<usize> {
        let v = payload
            .get(field)
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::invalid(format!("payload lacks integer {field:?}")))? as usize;
        if v >= bound {
            return Err(Error::invalid(format!("{field} {v} out of range (< {bound})")));
        }
        Ok(v)
    }

    /// `(query_symbol, answer_symbol)` of a demonstration payload.
    pub fn demo_symbols<S: Scalar>(&self, demo: &Demonstration<S>) -> Result<(usize, usize)> {
        Ok((
            self.symbol(&demo.payload, "query_symbol", self.num_query_symbols)?,
            self.symbol(&demo.payload, "answer_symbol", self.num_answers)?,
        ))
    }

    /// Task posterior given demonstration `(query, answer)` pairs.
    pub fn posterior(&self, pairs: &[(usize, usize)]) -> Vec<f64> {
        let log_lik: Vec<f64> = (0..self.num_tasks())
            .map(|t| pairs.iter().map(|(q, a)| self.likelihood(t, *q, *a).ln()).sum())
            .collect();
        let max = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_lik.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Predictive over answer symbols for `query_symbol` under `posterior`.
    pub fn predictive(&self, posterior: &[f64], query_symbol: usize) -> Vec<f64> {
        (0..self.num_answers)
            .map(|a| {
                posterior
                    .iter()
                    .enumerate()
                    .map(|(t, p)| p * self.likelihood(t, query_symbol, a))
                    .sum()
            })
            .collect()
    }

    /// Full next-token distribution (answers then end-of-sequence).
    pub fn next_token_probabilities<S: Scalar>(&self, request: &ContextRequest<'_, S>) -> Result<Vec<f64>> {
        let pairs = request
            .demonstrations
            .iter()
            .map(|d| self.demo_symbols(d))
            .collect::<Result<Vec<_>>>()?;
        let q = self.symbol(&request.query.payload, "query_symbol", self.num_query_symbols)?;
        if let Some(t) = request.partial_output.iter().find(|t| t.0 >= self.vocabulary.size()) {
            return Err(Error::invalid(format!("partial output token {} out of range", t.0)));
        }
        let predictive = self.predictive(&self.posterior(&pairs), q);
        let answer_mass = if request.partial_output.is_empty() {
            1.0 - EOS_MASS
        } else {
            EOS_MASS
        };
        let mut p: Vec<f64> = predictive.into_iter().map(|x| x * answer_mass).collect();
        p.push(1.0 - answer_mass);
        Ok(p)
    }
}

impl<S: Scalar> LogitProvider<S> for SyntheticTaskModel {
    fn score(&self, request: &ContextRequest<'_, S>) -> Result<LogitVector<S>> {
        let p = self.next_token_probabilities(request)?;
        LogitVector::new(p.into_iter().map(|x| S::lit(x.ln())).collect())
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn token_count(&self, request: &ContextRequest<'_, S>) -> Result<usize> {
        Ok(self.tokens_per_demo * request.demonstrations.len() + self.tokens_per_query + request.partial_output.len())
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }
}
