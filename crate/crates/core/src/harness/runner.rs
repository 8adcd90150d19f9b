//! End-to-end experiment execution.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{BackendKind, ExperimentConfig, Method, Selection};
use super::dataset::{load_dataset, Dataset};
use super::suite::generate_synthetic;
use crate::backends::{LogitProvider, Metered, RemoteClient, SyntheticTaskModel};
use crate::chunking::{diversity_select, kmeans_partition, random_partition, ChunkingConfig, ChunkingStrategy};
use crate::compilation::compute_weights;
use crate::decoding::{decode_full_context, decode_parallel, DecodeConfig, DecodeTrace};
use crate::domain::{Demonstration, Query};
use crate::error::{Error, Result};
use crate::metrics::{diversity, relevance, QueryRecord, ReferencePass, RunReport, Timestamp};

/// Independent stream seed for one query: splitmix64 over the run seed and
/// the FNV-1a hash of the query id.
pub fn query_seed(seed: u64, query_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in query_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Materialized inputs of a run.
pub struct Prepared {
    pub provider: Box<dyn LogitProvider<f64>>,
    pub dataset: Dataset,
    /// Present for the synthetic backend; supplies the default EOS token.
    pub model: Option<SyntheticTaskModel>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (dataset, model) = match (&cfg.data.synthetic, &cfg.data.path) {
        (Some(spec), _) => {
            let suite = generate_synthetic(spec).map_err(|e| Error::Config(e.to_string()))?;
            (suite.dataset, Some(suite.model))
        }
        (None, Some(path)) => {
            let model = match &cfg.data.model {
                Some(p) => {
                    let text = std::fs::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    Some(
                        serde_json::from_slice::<SyntheticTaskModel>(&text)
                            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                    )
                }
                None => None,
            };
            (load_dataset(path)?, model)
        }
        (None, None) => unreachable!("validated"),
    };
    let base: Box<dyn LogitProvider<f64>> = match cfg.backend.kind {
        BackendKind::Synthetic => Box::new(
            model
                .clone()
                .ok_or_else(|| Error::Config("synthetic backend without a model".into()))?,
        ),
        BackendKind::Remote => Box::new(RemoteClient::connect(&cfg.backend.remote)?),
    };
    let provider: Box<dyn LogitProvider<f64>> = if cfg.backend.metered {
        Box::new(Metered::new(base, cfg.cost.clone()).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        base
    };
    Ok(Prepared {
        provider,
        dataset,
        model,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<RunReport> {
    let mut decode = cfg.decode.clone();
    if decode.eos_token.is_none() {
        decode.eos_token = prepared.model.as_ref().map(SyntheticTaskModel::eos);
    }
    run_with(cfg, prepared.provider.as_ref(), &prepared.dataset, &decode)
}

/// Runs every query of `dataset` against `provider`. Queries execute
/// concurrently; the report does not depend on their order. A failing query
/// is recorded and the run goes on, except on protocol errors.
pub fn run_with(
    cfg: &ExperimentConfig,
    provider: &dyn LogitProvider<f64>,
    dataset: &Dataset,
    decode: &DecodeConfig,
) -> Result<RunReport> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let pool = dataset.demonstrations.len();
    let shots = cfg.shots.unwrap_or(pool);
    if shots > pool {
        return Err(Error::Config(format!(
            "shots={shots} exceeds the {pool} available demonstrations"
        )));
    }
    let k = match cfg.method {
        Method::Parallel => {
            cfg.chunking.validate(shots).map_err(|e| Error::Config(e.to_string()))?;
            cfg.chunking.k
        }
        Method::FullContext => 1,
    };

    let results: Vec<(String, Result<QueryRecord>)> = dataset
        .queries
        .par_iter()
        .map(|q| {
            (
                q.id.clone(),
                run_query(cfg, provider, &dataset.demonstrations, q, shots, decode),
            )
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    for (id, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(e) if e.is_protocol() => return Err(e),
            Err(e) => records.push(QueryRecord {
                query_id: id,
                output: None,
                reference: None,
                k,
                weights: Vec::new(),
                decode_steps: 0,
                latency: None,
                diversity: None,
                relevance: None,
                reference_pass: None,
                error: Some(e.to_string()),
            }),
        }
    }
    // A failed row still carries its reference so that it is not miscounted
    // as missing one.
    for r in records.iter_mut().filter(|r| r.error.is_some()) {
        r.reference = dataset
            .queries
            .iter()
            .find(|q| q.id == r.query_id)
            .and_then(|q| q.reference_answer.clone());
    }

    let config = serde_json::to_value(cfg)?;
    let timestamp = Timestamp {
        started_unix_secs: started
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    Ok(RunReport::new(cfg.name.clone(), shots, k, config, records, timestamp))
}

fn select_shots(
    cfg: &ExperimentConfig,
    demos: &[Demonstration],
    shots: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    match cfg.selection {
        Selection::Random if shots == demos.len() => Ok(demos.to_vec()),
        Selection::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, demos.len(), shots).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| demos[i].clone()).collect())
        }
        Selection::Diversity => diversity_select(demos, shots, cfg.chunking.feature_mode),
    }
}

fn run_query(
    cfg: &ExperimentConfig,
    provider: &dyn LogitProvider<f64>,
    pool: &[Demonstration],
    query: &Query,
    shots: usize,
    decode: &DecodeConfig,
) -> Result<QueryRecord> {
    let seed = query_seed(cfg.seed, &query.id);
    let shots = select_shots(cfg, pool, shots, seed)?;

    let (output, trace): (_, DecodeTrace) = match cfg.method {
        Method::Parallel => {
            // `chunking.seed` perturbs the per-query stream; 0 leaves it as is
            let chunking = ChunkingConfig {
                seed: seed ^ cfg.chunking.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..cfg.chunking.clone()
            };
            let plan = match chunking.strategy {
                ChunkingStrategy::Kmeans => kmeans_partition(&shots, &chunking)?,
                ChunkingStrategy::Random => random_partition(&shots, chunking.k, chunking.seed)?,
            };
            let weights = compute_weights(query, &plan, &shots, &cfg.compilation)?;
            let plan = plan.with_weights(weights)?;
            decode_parallel(provider, &shots, query, &plan, decode)?
        }
        Method::FullContext => decode_full_context(provider, &shots, query, decode)?,
    };

    let (relevance_value, reference_pass) = if !cfg.reference {
        (None, None)
    } else if cfg.method == Method::FullContext {
        (relevance(&trace, &trace, cfg.beta).ok(), Some(pass(&output, &trace)))
    } else {
        let (ref_out, ref_trace) = decode_full_context(provider, &shots, query, decode)?;
        (
            relevance(&trace, &ref_trace, cfg.beta).ok(),
            Some(pass(&ref_out, &ref_trace)),
        )
    };

    Ok(QueryRecord {
        query_id: query.id.clone(),
        reference: query.reference_answer.clone(),
        k: trace.k(),
        weights: trace.weights.clone(),
        decode_steps: trace.len(),
        latency: trace.latency,
        diversity: diversity(&trace).ok(),
        relevance: relevance_value,
        reference_pass,
        error: None,
        output: Some(output),
    })
}

fn pass(output: &[crate::domain::TokenId], trace: &DecodeTrace) -> ReferencePass {
    ReferencePass {
        output: output.to_vec(),
        decode_steps: trace.len(),
        latency: trace.latency,
    }
}
