//! k-means over fused target features.
//!
//! Seeding is k-means++ driven by hash keys of `(seed, round, point value)`
//! rather than by point position, so permuting the input permutes the
//! result. Iterations run with Elkan's triangle-inequality bounds;
//! [`lloyd_fit`] is the plain textbook loop and shares the centroid update
//! and the empty-cluster rule with the Elkan path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix64, unit_open};

pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("feature {index} contains non-finite values")]
    NonFinite { index: usize },
    #[error("feature {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("initial centroids: {0}")]
    BadInit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `k` centroids of the feature dimension.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Mean of squared distance `tau` within each cluster.
    pub per_cluster_mu: Vec<f64>,
    /// Population standard deviation of `tau` within each cluster.
    pub per_cluster_sigma: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iters` ran out before centroid movement fell below tol.
    pub converged: bool,
    /// Iterations (1-based) in which an empty cluster was reseeded.
    pub reseed_events: Vec<usize>,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_trace: Vec<f64>,
    /// Hash of the assignment vector at the same points as `inertia_trace`.
    pub assignment_trace: Vec<u64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn validate(features: &[Vec<f64>], k: usize) -> Result<usize, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > features.len() {
        return Err(ClusterError::TooManyClusters { k, n: features.len() });
    }
    let dim = features[0].len();
    for (index, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(ClusterError::DimensionMismatch { index, expected: dim, got: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite { index });
        }
    }
    Ok(dim)
}

fn point_key(seed: u64, round: u64, point: &[f64]) -> u64 {
    let mut h = mix64(seed ^ mix64(round.wrapping_add(0x5EED)));
    for v in point {
        // +0.0 and -0.0 hash alike
        let bits = if *v == 0.0 { 0 } else { v.to_bits() };
        h = mix64(h ^ bits);
    }
    h
}

/// k-means++ seeding.
///
/// The first centroid is the point with the smallest hash key, which is a
/// uniform choice. Each later centroid is drawn with probability
/// proportional to the squared distance to the nearest chosen centroid,
/// using exponential races `-ln(u) / D^2` over hash-derived uniforms.
pub fn kmeans_pp_init(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>, ClusterError> {
    validate(features, k)?;
    let n = features.len();
    let mut chosen = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut centroids = Vec::with_capacity(k);
    for round in 0..k {
        let mut best: Option<(f64, u64, usize)> = None;
        let any_weight = round > 0 && nearest.iter().zip(&chosen).any(|(&d, &c)| !c && d > 0.0);
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let h = point_key(seed, round as u64, &features[i]);
            let score = if any_weight {
                if nearest[i] <= 0.0 {
                    continue;
                }
                -unit_open(h).ln() / nearest[i]
            } else {
                // uniform over remaining points
                unit_open(h)
            };
            let better = match best {
                None => true,
                Some((s, bh, bi)) => score < s || (score == s && (h, i) < (bh, bi)),
            };
            if better {
                best = Some((score, h, i));
            }
        }
        let (_, _, pick) = best.expect("k <= n leaves a candidate every round");
        chosen[pick] = true;
        let c = features[pick].clone();
        for (i, f) in features.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(f, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

fn digest(assignments: &[usize]) -> u64 {
    assignments.iter().fold(0x1234_5678u64, |h, &a| mix64(h ^ a as u64))
}

fn inertia_of(features: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    features.iter().zip(assignments).map(|(f, &a)| sq_dist(f, &centroids[a])).sum()
}

/// Centroid update shared by both fitters. Empty clusters take, in cluster
/// order, the point farthest from its current centroid (ties to the lowest
/// index) whose own cluster keeps at least one member. Returns the moved
/// point indices.
fn update_centroids(
    features: &[Vec<f64>],
    assignments: &mut [usize],
    old: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = old.len();
    let dim = old[0].len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut moved = Vec::new();
    if counts.contains(&0) {
        let mut order: Vec<(f64, usize)> =
            features.iter().zip(assignments.iter()).enumerate().map(|(i, (f, &a))| (sq_dist(f, &old[a]), i)).collect();
        order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut cursor = order.into_iter();
        for c in 0..k {
            if counts[c] != 0 {
                continue;
            }
            for (_, i) in cursor.by_ref() {
                let from = assignments[i];
                if counts[from] > 1 {
                    counts[from] -= 1;
                    counts[c] = 1;
                    assignments[i] = c;
                    moved.push(i);
                    break;
                }
            }
        }
    }
    let mut sums = vec![vec![0.0; dim]; k];
    for (f, &a) in features.iter().zip(assignments.iter()) {
        sums[a].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .zip(old)
        .map(|((s, &n), prev)| if n == 0 { prev.clone() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect();
    (centroids, moved)
}

fn check_init(features: &[Vec<f64>], init: &[Vec<f64>]) -> Result<(), ClusterError> {
    let dim = validate(features, init.len())?;
    for (c, row) in init.iter().enumerate() {
        if row.len() != dim {
            return Err(ClusterError::BadInit(format!("centroid {c} has dimension {}, expected {dim}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::BadInit(format!("centroid {c} is not finite")));
        }
    }
    Ok(())
}

fn finish(
    features: &[Vec<f64>],
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    iterations: usize,
    converged: bool,
    reseed_events: Vec<usize>,
    inertia_trace: Vec<f64>,
    assignment_trace: Vec<u64>,
) -> ClusterModel {
    let k = centroids.len();
    let model = ClusterModel {
        inertia: inertia_of(features, &centroids, &assignments),
        centroids,
        assignments,
        per_cluster_mu: vec![0.0; k],
        per_cluster_sigma: vec![0.0; k],
        iterations,
        converged,
        reseed_events,
        inertia_trace,
        assignment_trace,
    };
    cluster_distance_stats(model, features)
}

/// Textbook Lloyd iterations from the given centroids. With
/// `max_iters = 0` the result is the assignment to `init` alone.
pub fn lloyd_fit(
    features: &[Vec<f64>],
    init: &[Vec<f64>],
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel, ClusterError> {
    check_init(features, init)?;
    let assign_all = |centroids: &[Vec<f64>]| -> Vec<usize> {
        features
            .iter()
            .map(|f| {
                let mut best = (f64::INFINITY, 0);
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = dist(f, centroid);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut centroids = init.to_vec();
    let mut assignments = assign_all(&centroids);
    let mut inertia_trace = vec![inertia_of(features, &centroids, &assignments)];
    let mut assignment_trace = vec![digest(&assignments)];
    let mut reseed_events = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let (next, moved) = update_centroids(features, &mut assignments, &centroids);
        iterations += 1;
        if !moved.is_empty() {
            reseed_events.push(iterations);
        }
        let shift = centroids.iter().zip(&next).map(|(a, b)| dist(a, b)).fold(0.0, f64::max);
        centroids = next;
        assignments = assign_all(&centroids);
        inertia_trace.push(inertia_of(features, &centroids, &assignments));
        assignment_trace.push(digest(&assignments));
        if shift < tol {
            converged = true;
            break;
        }
    }
    Ok(finish(features, centroids, assignments, iterations, converged, reseed_events, inertia_trace, assignment_trace))
}

/// Elkan-accelerated iterations from the given centroids.
pub fn elkan_fit(
    features: &[Vec<f64>],
    init: &[Vec<f64>],
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel, ClusterError> {
    check_init(features, init)?;
    let n = features.len();
    let k = init.len();
    let mut centroids = init.to_vec();
    let mut lower = vec![vec![0.0; k]; n];
    let mut upper = vec![0.0; n];
    let mut assignments = vec![0usize; n];
    for (i, f) in features.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = dist(f, centroid);
            lower[i][c] = d;
            if d < best.0 {
                best = (d, c);
            }
        }
        upper[i] = best.0;
        assignments[i] = best.1;
    }
    let mut inertia_trace = vec![inertia_of(features, &centroids, &assignments)];
    let mut assignment_trace = vec![digest(&assignments)];
    let mut reseed_events = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // Bounds carry round-off; only prune when the margin clearly exceeds it.
    let clearly_below = |u: f64, bound: f64| u + 1e-9 * (u + bound) < bound;

    while iterations < max_iters {
        let (next, moved) = update_centroids(features, &mut assignments, &centroids);
        iterations += 1;
        if !moved.is_empty() {
            reseed_events.push(iterations);
        }
        let shifts: Vec<f64> = centroids.iter().zip(&next).map(|(a, b)| dist(a, b)).collect();
        let max_shift = shifts.iter().copied().fold(0.0, f64::max);
        centroids = next;
        for i in 0..n {
            for c in 0..k {
                lower[i][c] = (lower[i][c] - shifts[c]).max(0.0);
            }
            upper[i] += shifts[assignments[i]];
        }
        for &i in &moved {
            upper[i] = f64::INFINITY;
        }

        let mut center_dist = vec![vec![0.0; k]; k];
        let mut half_nearest = vec![f64::INFINITY; k];
        for a in 0..k {
            for b in (a + 1)..k {
                let d = dist(&centroids[a], &centroids[b]);
                center_dist[a][b] = d;
                center_dist[b][a] = d;
                half_nearest[a] = half_nearest[a].min(0.5 * d);
                half_nearest[b] = half_nearest[b].min(0.5 * d);
            }
        }

        for (i, f) in features.iter().enumerate() {
            let mut a = assignments[i];
            if clearly_below(upper[i], half_nearest[a]) {
                continue;
            }
            let mut tight = false;
            for c in 0..k {
                if c == a {
                    continue;
                }
                let half = 0.5 * center_dist[a][c];
                if clearly_below(upper[i], lower[i][c]) || clearly_below(upper[i], half) {
                    continue;
                }
                if !tight {
                    let d = dist(f, &centroids[a]);
                    lower[i][a] = d;
                    upper[i] = d;
                    tight = true;
                    if clearly_below(d, lower[i][c]) || clearly_below(d, half) {
                        continue;
                    }
                }
                let d = dist(f, &centroids[c]);
                lower[i][c] = d;
                if d < upper[i] || (d == upper[i] && c < a) {
                    a = c;
                    upper[i] = d;
                }
            }
            assignments[i] = a;
        }
        inertia_trace.push(inertia_of(features, &centroids, &assignments));
        assignment_trace.push(digest(&assignments));
        if max_shift < tol {
            converged = true;
            break;
        }
    }
    Ok(finish(features, centroids, assignments, iterations, converged, reseed_events, inertia_trace, assignment_trace))
}

/// k-means++ seeding followed by Elkan iterations.
pub fn kmeans_fit(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel, ClusterError> {
    if max_iters == 0 {
        return Err(ClusterError::BadInit("max_iters must be at least 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(ClusterError::BadInit(format!("tol must be >= 0, got {tol}")));
    }
    let init = kmeans_pp_init(features, k, seed)?;
    elkan_fit(features, &init, max_iters, tol)
}

/// Squared distance of each feature to its assigned centroid.
pub fn assigned_distances(model: &ClusterModel, features: &[Vec<f64>]) -> Vec<f64> {
    features.iter().zip(&model.assignments).map(|(f, &a)| sq_dist(f, &model.centroids[a])).collect()
}

/// Fills in per-cluster mean and population standard deviation of the
/// squared distance to the centroid.
pub fn cluster_distance_stats(mut model: ClusterModel, features: &[Vec<f64>]) -> ClusterModel {
    let k = model.k();
    let tau = assigned_distances(&model, features);
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&t, &a) in tau.iter().zip(&model.assignments) {
        sum[a] += t;
        count[a] += 1;
    }
    let mu: Vec<f64> = sum.iter().zip(&count).map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    let mut var = vec![0.0; k];
    for (&t, &a) in tau.iter().zip(&model.assignments) {
        var[a] += (t - mu[a]) * (t - mu[a]);
    }
    model.per_cluster_sigma =
        var.iter().zip(&count).map(|(&v, &n)| if n <= 1 { 0.0 } else { (v / n as f64).sqrt() }).collect();
    model.per_cluster_mu = mu;
    model
}
