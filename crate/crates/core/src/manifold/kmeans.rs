use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

pub const MAX_ITERATIONS: usize = 200;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Farthest-first seeding from a seeded first pick, then Lloyd iterations
/// until the assignment stops changing.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("{k} clusters for {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Parameter("points differ in dimension".into()));
    }
    let first = rng::seeded(seed, stream::KMEANS).random_range(0..n);
    let mut centroids = vec![points[first].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut pick = 0;
        for i in 1..n {
            if min_d[i] > min_d[pick] {
                pick = i;
            }
        }
        centroids.push(points[pick].clone());
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut total = 0.0;
        for (label, p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            total += d;
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            // an emptied cluster keeps its previous centroid
            if cnt > 0 {
                *c = s.into_iter().map(|v| v / cnt as f64).collect();
            }
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        objective,
        converged,
    })
}

/// Fraction of points whose cluster's majority class matches their own.
pub fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; classes]; clusters];
    for (&l, &t) in labels.iter().zip(truth) {
        table[l][t] += 1;
    }
    let hits: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_centroid_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = kmeans(&pts, 1, 0).unwrap();
        assert_eq!(km.centroids[0], vec![2.0, 1.0]);
        assert!(km.converged);
    }

    #[test]
    fn two_blobs_separate() {
        let mut r = rng::seeded(3, 0);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let c = if i % 2 == 0 { 10.0 } else { -10.0 };
                vec![c + r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)]
            })
            .collect();
        let km = kmeans(&pts, 2, 9).unwrap();
        for (i, l) in km.labels.iter().enumerate() {
            assert_eq!(*l, km.labels[i % 2]);
        }
        assert_ne!(km.labels[0], km.labels[1]);
        assert_eq!(purity(&km.labels, &(0..40).map(|i| i % 2).collect::<Vec<_>>()), 1.0);
    }

    #[test]
    fn objective_never_increases() {
        let mut r = rng::seeded(5, 0);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
        let km = kmeans(&pts, 6, 1).unwrap();
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert_eq!(km, kmeans(&pts, 6, 1).unwrap());
    }

    #[test]
    fn too_many_clusters() {
        assert!(matches!(kmeans(&[vec![0.0]], 2, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 1, 1, 1]), 0.75);
    }
}
