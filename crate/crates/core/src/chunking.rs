//! Partitioning demonstrations into chunks.
//!
//! [`kmeans_partition`] clusters demonstration features with Lloyd's
//! algorithm (k-means++ seeding) so that each chunk gathers demonstrations of
//! one kind. [`random_partition`] and [`diversity_select`] are the ablation
//! and subset-selection baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{demo_ids, ChunkPlan, Demonstration, Featured};
use crate::error::{Error, Result};
use crate::numeric::{squared_distance, FeatureVector};
use crate::scalar::Scalar;

/// Which feature parts feed clustering and similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `[image ‖ text]`
    #[default]
    Multimodal,
    TextOnly,
    ImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkingStrategy {
    #[default]
    Kmeans,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingConfig {
    pub k: usize,
    pub strategy: ChunkingStrategy,
    pub feature_mode: FeatureMode,
    pub seed: u64,
    pub max_iterations: usize,
    pub centroid_tolerance: f64,
    pub normalize_features: bool,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            k: 1,
            strategy: ChunkingStrategy::Kmeans,
            feature_mode: FeatureMode::Multimodal,
            seed: 0,
            max_iterations: 100,
            centroid_tolerance: 1e-6,
            normalize_features: true,
        }
    }
}

impl ChunkingConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.k > n {
            return Err(Error::invalid(format!(
                "K={} exceeds the {n} available demonstrations",
                self.k
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        if self.centroid_tolerance.is_nan() || self.centroid_tolerance <= 0.0 {
            return Err(Error::invalid("centroid_tolerance must be positive"));
        }
        Ok(())
    }
}

/// Assembles the feature used for clustering and similarity.
pub fn build_feature<S: Scalar>(
    item: &impl Featured<S>,
    mode: FeatureMode,
    normalize: bool,
) -> Result<FeatureVector<S>> {
    let missing = |part: &str| Error::invalid(format!("{} has no {part} feature (required by {mode:?})", item.id()));
    let feature = match mode {
        FeatureMode::Multimodal => {
            let img = item.image_feature().ok_or_else(|| missing("image"))?;
            let txt = item.text_feature().ok_or_else(|| missing("text"))?;
            img.concat(txt)
        }
        FeatureMode::TextOnly => item.text_feature().ok_or_else(|| missing("text"))?.clone(),
        FeatureMode::ImageOnly => item.image_feature().ok_or_else(|| missing("image"))?.clone(),
    };
    if normalize {
        feature.normalized()
    } else {
        Ok(feature)
    }
}

fn build_all<S: Scalar>(demos: &[Demonstration<S>], mode: FeatureMode, normalize: bool) -> Result<Vec<Vec<S>>> {
    let points = demos
        .iter()
        .map(|d| build_feature(d, mode, normalize).map(|f| f.as_slice().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = points.first() {
        if let Some(bad) = points.iter().position(|p| p.len() != first.len()) {
            return Err(Error::invalid(format!(
                "demonstration {} has feature dimension {}, expected {}",
                demos[bad].id,
                points[bad].len(),
                first.len()
            )));
        }
    }
    Ok(points)
}

/// Sum of squared distances from each point to its cluster mean.
pub fn kmeans_objective<S: Scalar>(points: &[Vec<S>], assignment: &[usize], k: usize) -> S {
    let centroids = cluster_means(points, assignment, k);
    points
        .iter()
        .zip(assignment)
        .map(|(p, c)| squared_distance(p, &centroids[*c]))
        .sum()
}

fn cluster_means<S: Scalar>(points: &[Vec<S>], assignment: &[usize], k: usize) -> Vec<Vec<S>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![S::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, c) in points.iter().zip(assignment) {
        counts[*c] += 1;
        for (s, v) in sums[*c].iter_mut().zip(p) {
            *s += *v;
        }
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        if *n > 0 {
            let n = S::from_usize(*n).unwrap();
            s.iter_mut().for_each(|v| *v /= n);
        }
    }
    sums
}

/// Nearest centroid for every point; ties go to the lowest centroid index.
fn assign<S: Scalar>(points: &[Vec<S>], centroids: &[Vec<S>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = squared_distance(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = squared_distance(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Refills empty clusters with the point farthest from its own centroid.
fn repair_empty<S: Scalar>(points: &[Vec<S>], assignment: &mut [usize], centroids: &mut [Vec<S>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|c| counts[*c] += 1);
        let Some(empty) = counts.iter().position(|n| *n == 0) else {
            return;
        };
        let mut far: Option<(usize, S)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[assignment[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignment[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("n >= k guarantees a cluster with two members");
        assignment[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

/// Draws an index with probability proportional to `weights`.
fn draw_weighted(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, d) in weights.iter().enumerate() {
        acc += d;
        if *d > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave target past the final partial sum
    weights.iter().rposition(|d| *d > 0.0).unwrap()
}

/// Greedy k-means++: each step draws `2 + ln k` candidates by D² weighting
/// and keeps the one that lowers the potential most. A single draw seeds
/// two centroids in one cluster a few percent of the time at K = 8.
fn kmeans_pp<S: Scalar>(points: &[Vec<S>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<S>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]).as_f64())
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        if total > 0.0 {
            let mut best: Option<(f64, Vec<f64>, usize)> = None;
            for _ in 0..trials {
                let c = draw_weighted(&nearest, total, rng);
                let updated: Vec<f64> = nearest
                    .iter()
                    .zip(points)
                    .map(|(d, p)| d.min(squared_distance(p, &points[c]).as_f64()))
                    .collect();
                let potential: f64 = updated.iter().sum();
                if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                    best = Some((potential, updated, c));
                }
            }
            let (_, updated, c) = best.unwrap();
            chosen.push(c);
            nearest = updated;
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            let next = free[rng.random_range(0..free.len())];
            chosen.push(next);
            for (d, p) in nearest.iter_mut().zip(points) {
                *d = d.min(squared_distance(p, &points[next]).as_f64());
            }
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Full result of a k-means run.
#[derive(Debug, Clone)]
pub struct KmeansOutcome<S: Scalar = f64> {
    pub plan: ChunkPlan<S>,
    /// Objective after the k-means++ assignment, then after every iteration.
    pub objective_history: Vec<S>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn kmeans_partition<S: Scalar>(demos: &[Demonstration<S>], cfg: &ChunkingConfig) -> Result<ChunkPlan<S>> {
    kmeans_partition_detailed(demos, cfg).map(|o| o.plan)
}

pub fn kmeans_partition_detailed<S: Scalar>(
    demos: &[Demonstration<S>],
    cfg: &ChunkingConfig,
) -> Result<KmeansOutcome<S>> {
    cfg.validate(demos.len())?;
    let points = build_all(demos, cfg.feature_mode, cfg.normalize_features)?;
    let (assignment, objective_history, iterations, converged) = lloyd(&points, cfg);
    Ok(KmeansOutcome {
        plan: ChunkPlan::from_assignment(demo_ids(demos), assignment, cfg.k)?,
        objective_history,
        iterations,
        converged,
    })
}

fn lloyd<S: Scalar>(points: &[Vec<S>], cfg: &ChunkingConfig) -> (Vec<usize>, Vec<S>, usize, bool) {
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignment = assign(points, &centroids);
    repair_empty(points, &mut assignment, &mut centroids);
    let mut history = vec![kmeans_objective(points, &assignment, k)];
    let tolerance = S::lit(cfg.centroid_tolerance);

    for iter in 1..=cfg.max_iterations {
        let means = cluster_means(points, &assignment, k);
        let moved = means
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(S::zero(), |a, b| a.max(b));
        centroids = means;
        if moved < tolerance {
            return (assignment, history, iter, true);
        }
        assignment = assign(points, &centroids);
        repair_empty(points, &mut assignment, &mut centroids);
        history.push(kmeans_objective(points, &assignment, k));
    }
    (assignment, history, cfg.max_iterations, false)
}

/// Uniform random assignment, repaired so that no chunk is empty.
pub fn random_partition<S: Scalar>(demos: &[Demonstration<S>], k: usize, seed: u64) -> Result<ChunkPlan<S>> {
    if k == 0 || k > demos.len() {
        return Err(Error::invalid(format!(
            "cannot split {} demonstrations into {k} chunks",
            demos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<usize> = (0..demos.len()).map(|_| rng.random_range(0..k)).collect();
    for empty in 0..k {
        if assignment.contains(&empty) {
            continue;
        }
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|c| counts[*c] += 1);
        let donors: Vec<usize> = (0..demos.len()).filter(|i| counts[assignment[*i]] > 1).collect();
        let pick = donors[rng.random_range(0..donors.len())];
        assignment[pick] = empty;
    }
    ChunkPlan::from_assignment(demo_ids(demos), assignment, k)
}

/// Greedy max-min (farthest point) subset selection on raw features.
///
/// Seeds with the largest-norm demonstration and repeatedly adds the one
/// farthest from everything selected so far. Ties go to the earlier
/// demonstration. Returns positions into `demos`, in dataset order.
pub fn diversity_select_indices<S: Scalar>(
    demos: &[Demonstration<S>],
    m: usize,
    mode: FeatureMode,
) -> Result<Vec<usize>> {
    if m == 0 || m > demos.len() {
        return Err(Error::invalid(format!(
            "cannot select {m} of {} demonstrations",
            demos.len()
        )));
    }
    let points = build_all(demos, mode, false)?;
    let norms: Vec<S> = points.iter().map(|p| p.iter().map(|v| *v * *v).sum()).collect();
    let mut first = 0;
    for (i, n) in norms.iter().enumerate() {
        if *n > norms[first] {
            first = i;
        }
    }
    let mut selected = vec![first];
    let mut min_dist: Vec<S> = points.iter().map(|p| squared_distance(p, &points[first])).collect();
    while selected.len() < m {
        let mut best: Option<usize> = None;
        for (i, d) in min_dist.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| *d > min_dist[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("m <= n leaves a candidate");
        selected.push(next);
        for (d, p) in min_dist.iter_mut().zip(&points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    selected.sort_unstable();
    Ok(selected)
}

pub fn diversity_select<S: Scalar>(
    demos: &[Demonstration<S>],
    m: usize,
    mode: FeatureMode,
) -> Result<Vec<Demonstration<S>>> {
    Ok(diversity_select_indices(demos, m, mode)?
        .into_iter()
        .map(|i| demos[i].clone())
        .collect())
}
