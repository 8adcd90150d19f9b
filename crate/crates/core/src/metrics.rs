//! Trace diagnostics (diversity, relevance) and run-level aggregation.

use serde::{Deserialize, Serialize};

use crate::backends::LatencyBreakdown;
use crate::decoding::DecodeTrace;
use crate::domain::TokenId;
use crate::error::{Error, Result};
use crate::numeric::{kl_divergence, ProbabilityVector};
use crate::scalar::Scalar;

pub const DEFAULT_BETA: f64 = 100.0;

/// Bumped whenever the serialized [`RunReport`] layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// `(1 / (L K)) * sum_l sum_i sum_{j != i} KL(p_i || p_j)` over the chunk
/// distributions recorded at each step.
pub fn diversity<S: Scalar>(trace: &DecodeTrace<S>) -> Result<f64> {
    let k = trace.k();
    if k < 2 {
        return Err(Error::MetricUndefined(format!("diversity needs K >= 2, got {k}")));
    }
    if trace.is_empty() {
        return Err(Error::MetricUndefined("empty trace".into()));
    }
    let mut total = 0.0;
    for step in &trace.steps {
        let ps = &step.chunk_distributions;
        if ps.len() != k {
            return Err(Error::MetricUndefined("trace lacks per-chunk distributions".into()));
        }
        for (i, p) in ps.iter().enumerate() {
            for (j, q) in ps.iter().enumerate() {
                if i != j {
                    total += kl_divergence(p, q)?.as_f64().max(0.0);
                }
            }
        }
    }
    Ok(total / (trace.len() * k) as f64)
}

/// `(1 / L) * sum_l exp(-beta * KL(p_E || p_C))` where `p_E` comes from the
/// full-context `reference` and `p_C` from `trace`, over the first
/// `min(L, L_ref)` steps.
pub fn relevance<S: Scalar>(trace: &DecodeTrace<S>, reference: &DecodeTrace<S>, beta: f64) -> Result<f64> {
    if trace.query_id != reference.query_id {
        return Err(Error::invalid(format!(
            "relevance across different queries: {} vs {}",
            trace.query_id, reference.query_id
        )));
    }
    let steps = trace.len().min(reference.len());
    if steps == 0 {
        return Err(Error::MetricUndefined("empty trace".into()));
    }
    let compiled = |t: &DecodeTrace<S>, l: usize| -> Result<ProbabilityVector<S>> {
        t.steps[l]
            .compiled_distribution
            .clone()
            .ok_or_else(|| Error::MetricUndefined("trace lacks compiled distributions".into()))
    };
    let mut total = 0.0;
    for l in 0..steps {
        // round-off can push KL of near-identical inputs a hair below zero
        let kl = kl_divergence(&compiled(reference, l)?, &compiled(trace, l)?)?
            .as_f64()
            .max(0.0);
        total += (-beta * kl).exp();
    }
    Ok(total / steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// `None` when no query could be scored.
    pub accuracy: Option<f64>,
    pub scored: usize,
    pub correct: usize,
    pub missing_reference: usize,
}

/// Exact sequence match. Queries without a reference or without an output
/// (failed) are excluded and counted.
pub fn exact_match_accuracy(records: &[QueryRecord]) -> Accuracy {
    let mut acc = Accuracy {
        accuracy: None,
        scored: 0,
        correct: 0,
        missing_reference: 0,
    };
    for r in records {
        match (&r.output, &r.reference) {
            (_, None) => acc.missing_reference += 1,
            (Some(out), Some(reference)) => {
                acc.scored += 1;
                acc.correct += usize::from(out == reference);
            }
            (None, Some(_)) => {}
        }
    }
    if acc.scored > 0 {
        acc.accuracy = Some(acc.correct as f64 / acc.scored as f64);
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    /// Mean baseline latency over mean run latency.
    pub speedup: f64,
    /// Run accuracy over baseline accuracy (1.0 = 100%).
    pub approx_ratio: f64,
}

/// Compares two runs over the same query set.
pub fn speedup_and_ratio(run: &RunReport, baseline: &RunReport) -> Result<Comparison> {
    if query_ids(run) != query_ids(baseline) {
        return Err(Error::invalid("runs cover different query sets"));
    }
    let (run_agg, base_agg) = (&run.aggregates, &baseline.aggregates);
    let (Some(run_lat), Some(base_lat)) = (run_agg.mean_latency, base_agg.mean_latency) else {
        return Err(Error::invalid("latency missing from a run"));
    };
    let (Some(run_acc), Some(base_acc)) = (run_agg.accuracy.accuracy, base_agg.accuracy.accuracy) else {
        return Err(Error::invalid("accuracy missing from a run"));
    };
    ratio(&baseline.name, run_lat, base_lat, run_acc, base_acc)
}

fn query_ids(r: &RunReport) -> Vec<&str> {
    let mut v: Vec<&str> = r.queries.iter().map(|q| q.query_id.as_str()).collect();
    v.sort_unstable();
    v
}

fn ratio(name: &str, run_lat: f64, base_lat: f64, run_acc: f64, base_acc: f64) -> Result<Comparison> {
    if base_lat <= 0.0 || run_lat <= 0.0 {
        return Err(Error::invalid("latency must be positive for a speedup"));
    }
    if base_acc <= 0.0 {
        return Err(Error::invalid("baseline score is zero"));
    }
    Ok(Comparison {
        baseline: name.to_string(),
        speedup: base_lat / run_lat,
        approx_ratio: run_acc / base_acc,
    })
}

/// Outcome of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    /// `None` when the query failed.
    pub output: Option<Vec<TokenId>>,
    pub reference: Option<Vec<TokenId>>,
    pub k: usize,
    pub weights: Vec<f64>,
    pub decode_steps: usize,
    pub latency: Option<LatencyBreakdown>,
    pub diversity: Option<f64>,
    pub relevance: Option<f64>,
    /// Output and latency of the full-context reference pass, when run.
    pub reference_pass: Option<ReferencePass>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePass {
    pub output: Vec<TokenId>,
    pub decode_steps: usize,
    pub latency: Option<LatencyBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(flatten)]
    pub accuracy: Accuracy,
    pub failed: usize,
    pub mean_latency: Option<f64>,
    pub mean_prefill: Option<f64>,
    pub mean_decoding: Option<f64>,
    pub mean_diversity: Option<f64>,
    pub mean_relevance: Option<f64>,
    /// Against the in-run full-context reference pass.
    pub versus_full_context: Option<Comparison>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl Aggregates {
    /// Recomputes every aggregate from per-query rows.
    pub fn from_records(records: &[QueryRecord]) -> Self {
        let lat = |f: fn(&LatencyBreakdown) -> f64| mean(records.iter().filter_map(|r| r.latency.as_ref().map(f)));
        let accuracy = exact_match_accuracy(records);
        let mean_latency = lat(|l| l.total);

        let refs: Vec<QueryRecord> = records
            .iter()
            .filter_map(|r| {
                r.reference_pass.as_ref().map(|p| QueryRecord {
                    output: Some(p.output.clone()),
                    latency: p.latency,
                    ..r.clone()
                })
            })
            .collect();
        let versus_full_context = if refs.is_empty() {
            None
        } else {
            let base_lat = mean(refs.iter().filter_map(|r| r.latency.map(|l| l.total)));
            let base_acc = exact_match_accuracy(&refs).accuracy;
            match (mean_latency, base_lat, accuracy.accuracy, base_acc) {
                (Some(rl), Some(bl), Some(ra), Some(ba)) => ratio("full_context", rl, bl, ra, ba).ok(),
                _ => None,
            }
        };

        Self {
            accuracy,
            failed: records.iter().filter(|r| r.error.is_some()).count(),
            mean_latency,
            mean_prefill: lat(|l| l.prefill),
            mean_decoding: lat(|l| l.decoding),
            mean_diversity: mean(records.iter().filter_map(|r| r.diversity)),
            mean_relevance: mean(records.iter().filter_map(|r| r.relevance)),
            versus_full_context,
        }
    }
}

/// Wall-clock information; the only part of a report that varies between
/// identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamp {
    pub started_unix_secs: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    /// `N`, demonstrations used per query.
    pub shots: usize,
    /// Chunks per query; 1 for full context.
    pub k: usize,
    /// The resolved experiment configuration.
    pub config: serde_json::Value,
    /// Sorted by query id.
    pub queries: Vec<QueryRecord>,
    pub aggregates: Aggregates,
    pub timestamp: Timestamp,
}

impl RunReport {
    pub fn new(
        name: String,
        shots: usize,
        k: usize,
        config: serde_json::Value,
        mut queries: Vec<QueryRecord>,
        timestamp: Timestamp,
    ) -> Self {
        queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let aggregates = Aggregates::from_records(&queries);
        Self {
            schema_version: SCHEMA_VERSION,
            name,
            shots,
            k,
            config,
            queries,
            aggregates,
            timestamp,
        }
    }

    pub fn failed(&self) -> usize {
        self.aggregates.failed
    }

    pub fn to_json_pretty(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let report: RunReport = serde_json::from_slice(bytes)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported report schema version {} (expected {SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}
