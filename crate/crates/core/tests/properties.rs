mod common;

use proptest::prelude::*;

use common::{oracle_probabilities, synthetic_demo, synthetic_query};
use parallel_icl::backends::{ContextRequest, CostModel, LogitProvider, Metered, SyntheticTaskModel};
use parallel_icl::decoding::{decode_full_context, decode_parallel, DecodeConfig};
use parallel_icl::domain::{demo_ids, ChunkPlan, Demonstration, TokenId};
use parallel_icl::harness::{
    generate_synthetic, run_experiment, DataConfig, ExperimentConfig, Method, SyntheticSuiteSpec,
};
use parallel_icl::metrics::{diversity, relevance, Aggregates, DEFAULT_BETA};
use parallel_icl::numeric::{kl_divergence, softmax};

#[derive(Debug, Clone)]
struct Case {
    tables: Vec<Vec<usize>>,
    answers: usize,
    epsilon: f64,
    demos: Vec<(usize, usize)>,
    query: usize,
}

fn case(max_tasks: usize, max_demos: usize) -> impl Strategy<Value = Case> {
    (1..=max_tasks, 1usize..=6, 2usize..=6, 0.05f64..0.45).prop_flat_map(move |(t, q, a, eps)| {
        (
            proptest::collection::vec(proptest::collection::vec(0..a, q), t),
            proptest::collection::vec((0..q, 0..a), 0..=max_demos),
            0..q,
        )
            .prop_map(move |(tables, demos, query)| Case {
                tables,
                answers: a,
                epsilon: eps,
                demos,
                query,
            })
    })
}

impl Case {
    fn model(&self) -> SyntheticTaskModel {
        SyntheticTaskModel::new(self.tables[0].len(), self.answers, self.tables.clone(), self.epsilon).unwrap()
    }

    fn demonstrations(&self) -> Vec<Demonstration> {
        self.demos
            .iter()
            .enumerate()
            .map(|(i, (q, a))| synthetic_demo(&format!("d{i:02}"), *q, *a, &[1.0, i as f64]))
            .collect()
    }
}

fn probabilities(model: &SyntheticTaskModel, demos: &[&Demonstration], query: usize, partial: &[TokenId]) -> Vec<f64> {
    let q = synthetic_query("q", query, &[1.0, 0.0]);
    let req = ContextRequest {
        demonstrations: demos,
        query: &q,
        partial_output: partial,
    };
    let logits = LogitProvider::<f64>::score(model, &req).unwrap();
    softmax(&logits).unwrap().as_slice().to_vec()
}

fn decode_cfg(model: &SyntheticTaskModel) -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: 4,
        eos_token: Some(model.eos()),
        ..DecodeConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn synthetic_matches_enumeration(c in case(16, 64), after in any::<bool>()) {
        let model = c.model();
        let demos = c.demonstrations();
        let refs: Vec<&Demonstration> = demos.iter().collect();
        let partial = if after { vec![TokenId(0)] } else { vec![] };
        let got = probabilities(&model, &refs, c.query, &partial);
        let want = oracle_probabilities(&c.tables, c.epsilon, c.answers, &c.demos, c.query, after);
        prop_assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn synthetic_is_order_invariant(c in case(8, 24), seed in any::<u64>()) {
        let model = c.model();
        let demos = c.demonstrations();
        let refs: Vec<&Demonstration> = demos.iter().collect();
        let mut shuffled = refs.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        let a = probabilities(&model, &refs, c.query, &[]);
        let b = probabilities(&model, &shuffled, c.query, &[]);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_plan_reproduces_full_context(c in case(8, 24)) {
        prop_assume!(!c.demos.is_empty());
        let model = c.model();
        let demos = c.demonstrations();
        let query = synthetic_query("q", c.query, &[1.0, 0.0]);
        let plan = ChunkPlan::trivial(demo_ids(&demos)).unwrap();
        let cfg = decode_cfg(&model);
        let (pout, ptrace) = decode_parallel(&model, &demos, &query, &plan, &cfg).unwrap();
        let (fout, ftrace) = decode_full_context(&model, &demos, &query, &cfg).unwrap();
        prop_assert_eq!(pout, fout);
        prop_assert_eq!(ptrace.len(), ftrace.len());
        for (p, f) in ptrace.steps.iter().zip(&ftrace.steps) {
            let (p, f) = (p.compiled_logits.as_ref().unwrap(), f.compiled_logits.as_ref().unwrap());
            for (x, y) in p.as_slice().iter().zip(f.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn chunk_order_does_not_change_decoding(c in case(6, 24), k in 2usize..5, seed in any::<u64>()) {
        prop_assume!(c.demos.len() >= k);
        let model = c.model();
        let demos = c.demonstrations();
        let ids = demo_ids(&demos);
        let assignment: Vec<usize> = (0..demos.len()).map(|i| i % k).collect();
        let plan = ChunkPlan::from_assignment(ids.clone(), assignment, k).unwrap();
        let raw: Vec<f64> = (0..k).map(|i| 1.0 + (seed.rotate_left(i as u32 * 7) % 97) as f64).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

        let chunks: Vec<Vec<String>> = plan.chunk_ids().iter().map(|c| c.iter().map(|s| s.to_string()).collect()).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left((seed % k as u64) as usize);
        order.reverse();
        let permuted: Vec<Vec<String>> = order.iter().map(|i| chunks[*i].clone()).collect();
        let permuted_weights: Vec<f64> = order.iter().map(|i| weights[*i]).collect();

        let a = plan.clone().with_weights(weights).unwrap();
        // from_chunks canonicalizes labels by first appearance, so weights
        // follow the chunk contents rather than positions.
        let b = ChunkPlan::from_chunks(&ids, &permuted).unwrap();
        let mut bw = vec![0.0; k];
        for (chunk, w) in permuted.iter().zip(&permuted_weights) {
            bw[b.chunk_of(&chunk[0]).unwrap()] = *w;
        }
        let b = b.with_weights(bw).unwrap();

        let query = synthetic_query("q", c.query, &[1.0, 0.0]);
        let cfg = decode_cfg(&model);
        let (ta, tra) = decode_parallel(&model, &demos, &query, &a, &cfg).unwrap();
        let (tb, trb) = decode_parallel(&model, &demos, &query, &b, &cfg).unwrap();
        for (x, y) in tra.steps.iter().zip(&trb.steps) {
            let (x, y) = (x.compiled_logits.as_ref().unwrap(), y.compiled_logits.as_ref().unwrap());
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }
        let gap = {
            let p = tra.steps[0].compiled_distribution.as_ref().unwrap().as_slice();
            let mut s = p.to_vec();
            s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            s[0] - s[1]
        };
        if gap > 1e-6 {
            prop_assert_eq!(ta, tb);
        }
    }

    #[test]
    fn traces_are_complete_and_bounded(c in case(6, 24), k in 1usize..5, max in 1usize..6) {
        prop_assume!(c.demos.len() >= k);
        let model = c.model();
        let demos = c.demonstrations();
        let plan = ChunkPlan::from_assignment(demo_ids(&demos), (0..demos.len()).map(|i| i % k).collect(), k)
            .unwrap()
            .with_weights(vec![1.0 / k as f64; k])
            .unwrap();
        let query = synthetic_query("q", c.query, &[1.0, 0.0]);
        for eos in [Some(model.eos()), None] {
            let cfg = DecodeConfig { max_new_tokens: max, eos_token: eos, ..DecodeConfig::default() };
            let (out, trace) = decode_parallel(&model, &demos, &query, &plan, &cfg).unwrap();
            prop_assert!(trace.len() <= max);
            prop_assert!(out.len() <= trace.len());
            for s in &trace.steps {
                prop_assert_eq!(s.chunk_distributions.len(), k);
                prop_assert!(s.compiled_distribution.is_some());
            }
            if k >= 2 {
                prop_assert!(diversity(&trace).unwrap() >= 0.0);
            }
            let (_, reference) = decode_full_context(&model, &demos, &query, &cfg).unwrap();
            let r = relevance(&trace, &reference, DEFAULT_BETA).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            // exp(-beta KL) is strictly positive unless it underflows f64
            let smallest_exponent = trace
                .steps
                .iter()
                .zip(&reference.steps)
                .map(|(t, e)| {
                    DEFAULT_BETA * kl_divergence(
                        e.compiled_distribution.as_ref().unwrap(),
                        t.compiled_distribution.as_ref().unwrap(),
                    )
                    .unwrap()
                })
                .fold(f64::INFINITY, f64::min);
            if smallest_exponent < 700.0 {
                prop_assert!(r > 0.0);
            }
            prop_assert_eq!(relevance(&reference, &reference, DEFAULT_BETA).unwrap(), 1.0);
        }
    }
}

#[test]
fn identical_chunks_have_zero_diversity() {
    let model = SyntheticTaskModel::new(2, 2, vec![vec![0, 1], vec![1, 0]], 0.2).unwrap();
    let demos: Vec<Demonstration> = (0..4)
        .map(|i| synthetic_demo(&format!("d{i}"), 0, 0, &[1.0, 0.0]))
        .collect();
    let plan = ChunkPlan::from_assignment(demo_ids(&demos), vec![0, 0, 1, 1], 2)
        .unwrap()
        .with_weights(vec![0.5, 0.5])
        .unwrap();
    let query = synthetic_query("q", 1, &[1.0, 0.0]);
    let (_, trace) = decode_parallel(&model, &demos, &query, &plan, &decode_cfg(&model)).unwrap();
    assert_eq!(diversity(&trace).unwrap(), 0.0);
}

fn suite_config(spec: SyntheticSuiteSpec, k: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataConfig {
            synthetic: Some(spec),
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.chunking.k = k;
    cfg
}

#[test]
fn aggregates_recompute_from_rows() {
    let report = run_experiment(&suite_config(SyntheticSuiteSpec::default(), 4)).unwrap();
    let again = Aggregates::from_records(&report.queries);
    let a = &report.aggregates;
    let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    };
    assert!(close(a.accuracy.accuracy, again.accuracy.accuracy));
    assert!(close(a.mean_latency, again.mean_latency));
    assert!(close(a.mean_diversity, again.mean_diversity));
    assert!(close(a.mean_relevance, again.mean_relevance));
    let manual = report.queries.iter().filter(|q| q.output == q.reference).count() as f64 / report.queries.len() as f64;
    assert!((a.accuracy.accuracy.unwrap() - manual).abs() <= 1e-9);
    let lat: f64 = report.queries.iter().map(|q| q.latency.unwrap().total).sum::<f64>() / report.queries.len() as f64;
    assert!((a.mean_latency.unwrap() - lat).abs() <= 1e-9);
}

#[test]
fn k1_and_full_context_agree() {
    let spec = SyntheticSuiteSpec {
        seed: 11,
        ..SyntheticSuiteSpec::default()
    };
    let k1 = run_experiment(&suite_config(spec.clone(), 1)).unwrap();
    let mut fc_cfg = suite_config(spec, 1);
    fc_cfg.method = Method::FullContext;
    let fc = run_experiment(&fc_cfg).unwrap();
    assert_eq!(k1.aggregates.accuracy, fc.aggregates.accuracy);
    for (a, b) in k1.queries.iter().zip(&fc.queries) {
        assert_eq!(a.output, b.output);
    }
}

#[test]
fn report_independent_of_thread_count() {
    let cfg = suite_config(SyntheticSuiteSpec::default(), 4);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let mut r = pool.install(|| run_experiment(&cfg)).unwrap();
        r.timestamp.started_unix_secs = 0.0;
        r.timestamp.wall_clock_secs = 0.0;
        r.to_json_pretty()
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn synthetic_suite_round_trips_through_files() {
    let suite = generate_synthetic(&SyntheticSuiteSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    parallel_icl::harness::save_dataset(&suite.dataset, &path).unwrap();
    let back = parallel_icl::harness::load_dataset::<f64>(&path).unwrap();
    assert_eq!(back, suite.dataset);
}

#[test]
fn chunking_never_increases_prefill_for_quadratic_models() {
    // a2 (L/K + q)^2 <= a2 (L + q)^2 for the configurations used by the
    // acceptance suite, and the simulated prefill follows.
    let per_demo = SyntheticTaskModel::DEFAULT_TOKENS_PER_DEMO;
    let q = SyntheticTaskModel::DEFAULT_TOKENS_PER_QUERY;
    let fit = CostModel::fit_prefill(&parallel_icl::backends::MEASURED_PREFILL).unwrap();
    let quadratic = CostModel {
        prefill_quadratic: fit.ols_quadratic.abs().max(1e-10),
        ..CostModel::default()
    };
    for n in [8usize, 16, 32] {
        for k in [2usize, 4, 8] {
            let l = (n * per_demo) as f64;
            let a2 = quadratic.prefill_quadratic;
            assert!(a2 * (l / k as f64 + q as f64).powi(2) <= a2 * (l + q as f64).powi(2));
            let m = Metered::new(
                SyntheticTaskModel::new(1, 2, vec![vec![0]], 0.1).unwrap(),
                quadratic.clone(),
            )
            .unwrap();
            let cm = LogitProvider::<f64>::cost_model(&m).unwrap();
            let chunked = cm.prefill_latency(&vec![n / k * per_demo + q; k]);
            let full = cm.prefill_latency(&[n * per_demo + q]);
            assert!(chunked <= full);
        }
    }
}
