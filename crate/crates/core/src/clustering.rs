//! K-Means over concatenated scene/action embeddings.
//!
//! Seeding is k-means++ over points sorted by `pair_ref`, so results are
//! independent of input order. Lloyd iterations run until the largest
//! centroid shift drops below `tol` or `max_iter` is reached. A cluster left
//! empty by an assignment step takes over the point farthest from its own
//! centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codex::InductionConfig;
use crate::corpus::SceneActionPair;
use crate::oracle::{embed_scene, Embedder, OracleError};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPair {
    pub pair_ref: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Cluster id per input point, aligned with the input slice.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub history: Vec<f64>,
}

/// `clamp(floor(n / min_cluster_size), 1, max_clusters)`.
pub fn choose_k(n: usize, min_cluster_size: usize, max_clusters: usize) -> usize {
    (n / min_cluster_size.max(1)).clamp(1, max_clusters.max(1))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(squared_distance(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

pub fn kmeans(
    points: &[EmbeddedPair],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Clustering, ClusteringError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(ClusteringError::Argument(format!("k={k} must be in 1..={n}")));
    }
    let dim = points[0].vector.len();
    if points.iter().any(|p| p.vector.len() != dim) {
        return Err(ClusteringError::Argument("points differ in dimensionality".into()));
    }
    if points.iter().any(|p| p.vector.iter().any(|x| !x.is_finite())) {
        return Err(ClusteringError::Argument("non-finite embedding component".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| points[i].pair_ref);
    let pts: Vec<&[f64]> = order.iter().map(|&i| points[i].vector.as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(&pts, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        for (i, p) in pts.iter().enumerate() {
            let (best, d) = nearest(p, &centroids);
            let keep = assign[i] != usize::MAX && squared_distance(p, &centroids[assign[i]]) <= d;
            if !keep {
                assign[i] = best;
            }
        }
        let mut sizes = vec![0usize; k];
        for &c in &assign {
            sizes[c] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[assign[i]] > 1)
                .map(|i| (i, squared_distance(pts[i], &centroids[assign[i]])))
                .fold(None::<(usize, f64)>, |best, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                })
                .expect("k <= n leaves a cluster with two members")
                .0;
            sizes[assign[far]] -= 1;
            assign[far] = empty;
            sizes[empty] = 1;
            centroids[empty] = pts[far].to_vec();
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (i, p) in pts.iter().enumerate() {
            for (s, x) in sums[assign[i]].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, sum) in sums.into_iter().enumerate() {
            let mean: Vec<f64> = sum.into_iter().map(|s| s / sizes[c] as f64).collect();
            shift = shift.max(squared_distance(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        history.push(inertia_of(&pts, &assign, &centroids));
        if shift < tol {
            break;
        }
    }

    // relabel clusters by first appearance in canonical order
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for &c in &assign {
        if relabel[c] == usize::MAX {
            relabel[c] = next;
            next += 1;
        }
    }
    let mut new_centroids = vec![Vec::new(); k];
    for (old, centroid) in centroids.into_iter().enumerate() {
        new_centroids[relabel[old]] = centroid;
    }
    let mut assignments = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = relabel[assign[pos]];
    }
    Ok(Clustering {
        k,
        assignments,
        centroids: new_centroids,
        inertia: *history.last().expect("at least one iteration"),
        history,
    })
}

fn inertia_of(pts: &[&[f64]], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    pts.iter()
        .zip(assign)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Concatenated `[scene | action]` embedding for one pair.
pub fn embed_pair(
    pair: &SceneActionPair,
    embedder: &dyn Embedder,
    config: &InductionConfig,
) -> Result<Vec<f64>, OracleError> {
    let mut scene = embed_scene(embedder, &pair.scene_text(), &pair.character, config.instruction_embedding)?;
    let mut action = embedder.embed_action(&pair.action.text)?;
    if config.normalize_embedding_halves {
        scene = unit(scene);
        action = unit(action);
    }
    scene.extend(action);
    Ok(scene)
}

/// Partitions a node's dataset (indices into `pairs`) into clusters, each
/// listed in dataset order. With clustering disabled, or when the size rule
/// gives one cluster, the whole dataset is returned as a single cluster.
pub fn cluster_node_data(
    pairs: &[SceneActionPair],
    dataset: &[usize],
    embedder: &dyn Embedder,
    config: &InductionConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>, ClusteringError> {
    if dataset.is_empty() {
        return Err(ClusteringError::Argument("empty dataset".into()));
    }
    let k = choose_k(dataset.len(), config.min_cluster_size, config.max_clusters);
    if !config.clustering_enabled || k == 1 {
        return Ok(vec![dataset.to_vec()]);
    }
    let points = dataset
        .par_iter()
        .map(|&i| {
            embed_pair(&pairs[i], embedder, config).map(|vector| EmbeddedPair { pair_ref: i, vector })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let clustering = kmeans(&points, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mut clusters = vec![Vec::new(); k];
    for (&i, &c) in dataset.iter().zip(&clustering.assignments) {
        clusters[c].push(i);
    }
    Ok(clusters)
}
