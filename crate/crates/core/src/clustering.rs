//! Seeded k-means (k-means++ seeding, Lloyd iterations) and attention-based
//! selection of the representative cluster.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::providers::EmbeddingVector;

/// Upper bound on the number of clusters used anywhere in the pipeline.
pub const MAX_CLUSTERS: usize = 5;
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("no vectors to cluster")]
    Empty,
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("k_max must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id per input item, numbered by first appearance in input order.
    pub labels: Vec<usize>,
    pub centroids: Vec<EmbeddingVector>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == cluster).map(|(i, _)| i).collect()
    }

    /// The partition as sorted member lists, sorted; independent of label numbering.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = (0..self.k).map(|c| self.members(c)).collect();
        groups.sort();
        groups
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cmp_vectors(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Within-cluster sum of squared distances.
pub fn wcss(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, l)| sq_dist(p, &centroids[*l])).sum()
}

/// k-means with `k = min(k_max, MAX_CLUSTERS, distinct vectors)`.
///
/// Points are processed in a canonical (lexicographic) order so the resulting
/// partition does not depend on input order. Seeding is k-means++ driven by
/// `seed`; Lloyd iterations stop at an assignment fixpoint or after
/// [`MAX_ITERATIONS`]. A cluster left empty is reseeded with the point
/// farthest from its centroid.
pub fn kmeans(vectors: &[EmbeddingVector], k_max: usize, seed: u64) -> Result<ClusterAssignment, ClusterError> {
    kmeans_traced(vectors, k_max, seed).map(|(a, _)| a)
}

/// As [`kmeans`], also returning the within-cluster sum of squares after
/// every Lloyd iteration.
pub fn kmeans_traced(
    vectors: &[EmbeddingVector],
    k_max: usize,
    seed: u64,
) -> Result<(ClusterAssignment, Vec<f64>), ClusterError> {
    if vectors.is_empty() {
        return Err(ClusterError::Empty);
    }
    if k_max == 0 {
        return Err(ClusterError::InvalidK);
    }
    let dim = vectors[0].dimension();
    for (index, v) in vectors.iter().enumerate() {
        if v.dimension() != dim {
            return Err(ClusterError::DimensionMismatch { index, expected: dim, found: v.dimension() });
        }
    }

    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|a, b| cmp_vectors(vectors[*a].values(), vectors[*b].values()));
    let points: Vec<&[f64]> = order.iter().map(|i| vectors[*i].values()).collect();
    let mut distinct: Vec<&[f64]> = points.clone();
    distinct.dedup_by(|a, b| cmp_vectors(a, b).is_eq());
    let k = k_max.min(MAX_CLUSTERS).min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![distinct[rng.random_range(0..distinct.len())].to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = distinct.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = weights.iter().rposition(|w| *w > 0.0).expect("k <= distinct points");
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.push(distinct[pick].to_vec());
    }

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(&points, &mut labels, &mut centroids);
    let mut trace = vec![wcss(&points, &labels, &centroids)];
    for _ in 0..MAX_ITERATIONS {
        centroids = recompute(&points, &labels, &centroids);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(&points, &mut next, &mut centroids);
        trace.push(wcss(&points, &next, &centroids));
        if next == labels {
            break;
        }
        labels = next;
    }
    centroids = recompute(&points, &labels, &centroids);

    // back to input order, clusters numbered by first appearance
    let mut by_input = vec![0; vectors.len()];
    for (pos, idx) in order.iter().enumerate() {
        by_input[*idx] = labels[pos];
    }
    let mut renumber: Vec<Option<usize>> = vec![None; k];
    let mut next_id = 0;
    for l in &by_input {
        if renumber[*l].is_none() {
            renumber[*l] = Some(next_id);
            next_id += 1;
        }
    }
    let mut out_centroids = vec![EmbeddingVector(Vec::new()); k];
    for (old, new) in renumber.iter().enumerate() {
        out_centroids[new.expect("no empty clusters")] = EmbeddingVector(centroids[old].clone());
    }
    let labels = by_input.iter().map(|l| renumber[*l].expect("no empty clusters")).collect();
    Ok((ClusterAssignment { k, labels, centroids: out_centroids }, trace))
}

fn recompute(points: &[&[f64]], labels: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, l) in points.iter().zip(labels) {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| if n == 0 { prev.clone() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

fn repair_empty(points: &[&[f64]], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for l in labels.iter() {
            counts[*l] += 1;
        }
        let Some(empty) = counts.iter().position(|c| *c == 0) else { return };
        let far = (0..points.len())
            .filter(|i| counts[labels[*i]] > 1)
            .max_by(|a, b| {
                sq_dist(points[*a], &centroids[labels[*a]])
                    .total_cmp(&sq_dist(points[*b], &centroids[labels[*b]]))
                    .then(b.cmp(a))
            })
            .expect("k <= distinct points leaves a cluster with two members");
        labels[far] = empty;
        centroids[empty] = points[far].to_vec();
    }
}

/// Picks the cluster whose members have the highest mean weight (missing
/// weights count as 0); ties go to the lower cluster id. Returns the cluster
/// id and its member items in input order.
pub fn select_representative_cluster(
    items: &[String],
    assignment: &ClusterAssignment,
    weights: &BTreeMap<String, f64>,
) -> (usize, Vec<String>) {
    let mut best: Option<(usize, f64)> = None;
    for cluster in 0..assignment.k {
        let members = assignment.members(cluster);
        if members.is_empty() {
            continue;
        }
        let mean = members.iter().map(|i| weights.get(&items[*i]).copied().unwrap_or(0.0)).sum::<f64>()
            / members.len() as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((cluster, mean));
        }
    }
    let cluster = best.map(|(c, _)| c).unwrap_or(0);
    (cluster, assignment.members(cluster).into_iter().map(|i| items[i].clone()).collect())
}
