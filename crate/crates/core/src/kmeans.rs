//! Batch Lloyd k-means with k-means++ seeding and best-of-n restarts.
//!
//! Deterministic for a given seed. The number of clusters is capped at the
//! number of distinct input points, and clusters that lose all members during
//! an iteration are dropped rather than re-seeded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            max_iter: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index of every input point.
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    /// Within-cluster sum of squares of the returned clustering.
    pub wcss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every mean update of the winning restart.
    pub history: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of pairwise-distinct points (bitwise comparison).
pub fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn wcss(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

pub fn fit(points: &[Vec<f64>], config: &KMeansConfig) -> Result<Clustering> {
    let first = points
        .first()
        .ok_or_else(|| Error::Degenerate("k-means on an empty point set".into()))?;
    if config.k == 0 {
        return Err(Error::Domain("k-means needs k >= 1".into()));
    }
    let depth = first.len();
    if points.iter().any(|p| p.len() != depth) {
        return Err(Error::Dimension("k-means points of unequal depth".into()));
    }
    let k = config.k.min(distinct_count(points));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..config.restarts.max(1) {
        let seeds = plus_plus_seeds(points, k, &mut rng);
        let run = lloyd(points, seeds, config.max_iter);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let Some(idx) = pick else { break };
        let c = points[idx].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids)).collect()
}

/// Cluster means of `assignments`; empty clusters are removed and the
/// assignment labels compacted to match.
fn update(points: &[Vec<f64>], assignments: &mut [usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let depth = points[0].len();
    let mut sums = vec![vec![0.0; depth]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments.iter()) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut remap = vec![usize::MAX; k];
    let mut centroids = Vec::with_capacity(k);
    let mut kept_counts = Vec::with_capacity(k);
    for (i, (sum, &n)) in sums.into_iter().zip(&counts).enumerate() {
        if n == 0 {
            continue;
        }
        remap[i] = centroids.len();
        centroids.push(sum.into_iter().map(|s| s / n as f64).collect());
        kept_counts.push(n);
    }
    for a in assignments.iter_mut() {
        *a = remap[*a];
    }
    (centroids, kept_counts)
}

fn lloyd(points: &[Vec<f64>], seeds: Vec<Vec<f64>>, max_iter: usize) -> Clustering {
    let mut assignments = assign(points, &seeds);
    let (mut centroids, mut counts) = update(points, &mut assignments, seeds.len());
    let mut history = vec![wcss(points, &centroids, &assignments)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut next = assign(points, &centroids);
        if next == assignments {
            converged = true;
            break;
        }
        let (c, n) = update(points, &mut next, centroids.len());
        centroids = c;
        counts = n;
        assignments = next;
        history.push(wcss(points, &centroids, &assignments));
    }
    Clustering {
        wcss: *history.last().expect("history is never empty"),
        centroids,
        assignments,
        counts,
        iterations,
        converged,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_duplicates_recovered_exactly() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![0.0, 0.0],
        ];
        let c = fit(&pts, &KMeansConfig::new(2, 1)).unwrap();
        assert_eq!(c.wcss, 0.0);
        let mut cents = c.centroids.clone();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cents, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert_eq!(c.counts.iter().sum::<usize>(), 5);
    }

    #[test]
    fn identical_points_collapse_to_one_cluster() {
        let pts = vec![vec![1.5, -2.0, 3.0]; 7];
        let c = fit(&pts, &KMeansConfig::new(3, 9)).unwrap();
        assert_eq!(c.k(), 1);
        assert_eq!(c.centroids[0], vec![1.5, -2.0, 3.0]);
        assert_eq!(c.counts, vec![7]);
    }

    #[test]
    fn distinct_count_treats_signed_zero_as_equal() {
        assert_eq!(distinct_count(&[vec![0.0], vec![-0.0], vec![1.0]]), 2);
    }

    #[test]
    fn errors() {
        assert!(fit(&[], &KMeansConfig::new(2, 0)).is_err());
        assert!(fit(&[vec![1.0]], &KMeansConfig::new(0, 0)).is_err());
        assert!(fit(&[vec![1.0], vec![1.0, 2.0]], &KMeansConfig::new(1, 0)).is_err());
    }
}
