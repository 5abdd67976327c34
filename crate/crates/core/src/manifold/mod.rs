//! Geometry of generated adapter clouds: random projection with a distortion
//! audit, clustering, neighbor consistency and spread statistics.

mod kmeans;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, purity, KMeans, MAX_ITERATIONS};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use kmeans::sq_dist;

/// Per-sample update vectors with their conditions and task ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCloud {
    pub vectors: Vec<Vec<f64>>,
    pub conditions: Vec<Vec<f64>>,
    pub tasks: Vec<usize>,
}

impl ParamCloud {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vectors.len();
        if self.conditions.len() != n || self.tasks.len() != n {
            return Err(Error::Parameter("cloud lists are not aligned".into()));
        }
        if let Some(first) = self.vectors.first() {
            if self.vectors.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Parameter("cloud vectors differ in dimension".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    /// Entries `N(0, 1/k)`.
    Gaussian,
    /// Orthonormal columns scaled by `√(D/k)`, so squared norms are kept in
    /// expectation; an isometry when `k = D`.
    Orthonormal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `D×k`.
    pub matrix: Tensor,
}

impl Projection {
    pub fn new(dim: usize, k: usize, kind: ProjectionKind, seed: u64) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(Error::Parameter(format!("projection target {k} for dimension {dim}")));
        }
        let mut r = rng::seeded(seed, stream::PROJECTION);
        let g = Tensor::randn(&[dim, k], 1.0 / (k as f64).sqrt(), &mut r);
        let matrix = match kind {
            ProjectionKind::Gaussian => g,
            ProjectionKind::Orthonormal => orthonormal_columns(&g).scale((dim as f64 / k as f64).sqrt()),
        };
        Ok(Self { matrix })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let row = Tensor::new(vec![1, v.len()], v.to_vec())?;
        Ok(row.matmul(&self.matrix)?.into_data())
    }

    pub fn apply_all(&self, vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vectors.par_iter().map(|v| self.apply(v)).collect()
    }
}

/// Modified Gram–Schmidt on the columns, twice for stability.
fn orthonormal_columns(g: &Tensor) -> Tensor {
    let (d, k) = (g.shape()[0], g.shape()[1]);
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..d).map(|i| g.at(i, j)).collect()).collect();
    for _ in 0..2 {
        for j in 0..k {
            for p in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, q) in tail[0].iter_mut().zip(&head[p]) {
                    *x -= dot * q;
                }
            }
            let n = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            cols[j].iter_mut().for_each(|x| *x /= n);
        }
    }
    Tensor::from_fn(&[d, k], |idx| cols[idx % k][idx / k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionAudit {
    pub pairs: usize,
    /// Pairs skipped because the original vectors coincide.
    pub coincident: usize,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub vectors: Vec<Vec<f64>>,
    pub audit: DistortionAudit,
}

/// Projects `vectors` to `k` dimensions and audits
/// `|‖Pu − Pv‖ / ‖u − v‖ − 1|` over every pair.
pub fn random_project(vectors: &[Vec<f64>], k: usize, kind: ProjectionKind, seed: u64) -> Result<Projected> {
    if vectors.len() < 2 {
        return Err(Error::Parameter("projection needs at least two vectors".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Parameter("vectors differ in dimension".into()));
    }
    let proj = Projection::new(dim, k, kind, seed)?;
    let out = proj.apply_all(vectors)?;
    let audit = audit_distortion(vectors, &out);
    Ok(Projected { vectors: out, audit })
}

pub fn audit_distortion(original: &[Vec<f64>], projected: &[Vec<f64>]) -> DistortionAudit {
    let n = original.len();
    let rows: Vec<(usize, f64, f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut cnt, mut max, mut sum, mut same) = (0usize, 0.0f64, 0.0, 0usize);
            for j in i + 1..n {
                let d0 = sq_dist(&original[i], &original[j]).sqrt();
                if d0 == 0.0 {
                    same += 1;
                    continue;
                }
                let d1 = sq_dist(&projected[i], &projected[j]).sqrt();
                let e = (d1 / d0 - 1.0).abs();
                cnt += 1;
                max = max.max(e);
                sum += e;
            }
            (cnt, max, sum, same)
        })
        .collect();
    let pairs: usize = rows.iter().map(|r| r.0).sum();
    let sum: f64 = rows.iter().map(|r| r.2).sum();
    DistortionAudit {
        pairs,
        coincident: rows.iter().map(|r| r.3).sum(),
        max: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        mean: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub const HISTOGRAM_BINS: usize = 50;

/// 50 equal bins over `[−1, 1]`, bin `b` covering `[−1 + 0.04·b, −1 + 0.04·(b+1))`;
/// `1.0` lands in the last bin.
pub fn cosine_bin(c: f64) -> usize {
    (((c + 1.0) / 0.04).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub neighbors: usize,
    pub knn_mean: f64,
    pub random_mean: f64,
    pub margin: f64,
    pub knn_histogram: Vec<u64>,
    pub random_histogram: Vec<u64>,
    /// Samples whose k-th and (k+1)-th neighbor distances tie.
    pub boundary_ties: usize,
}

/// Condition similarity of parameter-space nearest neighbors against an
/// equal number of seeded random pairs.
pub fn knn_consistency(points: &[Vec<f64>], conditions: &[Vec<f64>], k: usize, seed: u64) -> Result<KnnReport> {
    let n = points.len();
    if conditions.len() != n {
        return Err(Error::Parameter("points and conditions are not aligned".into()));
    }
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!("{k} neighbors among {n} points")));
    }
    let per_point: Vec<(Vec<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&points[i], &points[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let tie = d.len() > k && d[k - 1].0 == d[k].0;
            let sims = d[..k].iter().map(|&(_, j)| cosine(&conditions[i], &conditions[j])).collect();
            (sims, tie)
        })
        .collect();
    let knn: Vec<f64> = per_point.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    let boundary_ties = per_point.iter().filter(|(_, t)| *t).count();
    let mut r = rng::seeded(seed, stream::KNN);
    let random: Vec<f64> = (0..knn.len())
        .map(|_| {
            let i = r.random_range(0..n);
            let mut j = r.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            cosine(&conditions[i], &conditions[j])
        })
        .collect();
    let hist = |v: &[f64]| {
        let mut h = vec![0u64; HISTOGRAM_BINS];
        v.iter().for_each(|c| h[cosine_bin(*c)] += 1);
        h
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (knn_mean, random_mean) = (mean(&knn), mean(&random));
    Ok(KnnReport {
        neighbors: k,
        knn_mean,
        random_mean,
        margin: knn_mean - random_mean,
        knn_histogram: hist(&knn),
        random_histogram: hist(&random),
        boundary_ties,
    })
}

/// Coordinates on the top two principal components, by power iteration with
/// deflation on the covariance. Each component's sign is fixed so its largest
/// magnitude entry is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Parameter("principal components need two points".into()));
    }
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let x = Tensor::new(vec![n, dim], centered.concat())?;
    let mut cov = x.t().matmul(&x)?.scale(1.0 / n as f64);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut r = rng::seeded(0, stream::SPECTRAL);
    for _ in 0..2.min(dim) {
        let mut v = Tensor::randn(&[dim, 1], 1.0, &mut r);
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let w = cov.matmul(&v)?;
            let norm = w.sq_norm().sqrt();
            if norm == 0.0 {
                break;
            }
            let next = w.scale(1.0 / norm);
            let diff = next.sub(&v)?.sq_norm();
            v = next;
            lambda = norm;
            if diff < 1e-26 {
                break;
            }
        }
        let mut c = v.into_data();
        let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        let ct = Tensor::new(vec![dim, 1], c.clone())?;
        cov = cov.sub(&ct.matmul(&ct.t())?.scale(lambda))?;
        comps.push(c);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; dim]);
    }
    Ok(centered
        .iter()
        .map(|p| {
            let dot = |c: &[f64]| p.iter().zip(c).map(|(a, b)| a * b).sum();
            [dot(&comps[0]), dot(&comps[1])]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    /// Mean pairwise distance between task centroids over mean distance to
    /// the own-task centroid.
    pub separation_ratio: f64,
    pub inter_centroid: f64,
    pub intra_spread: f64,
    /// Mean norm of the vectors, i.e. displacement from a zero update.
    pub mean_displacement: f64,
    pub diameter: f64,
}

pub fn spread_stats(vectors: &[Vec<f64>], tasks: &[usize]) -> Result<SpreadStats> {
    let k = tasks.iter().max().map_or(0, |m| m + 1);
    let present: Vec<usize> = (0..k).filter(|t| tasks.contains(t)).collect();
    if present.len() < 2 {
        return Err(Error::Contract("spread comparison needs at least two tasks".into()));
    }
    let dim = vectors[0].len();
    let centroid = |t: usize| {
        let members: Vec<&Vec<f64>> = vectors.iter().zip(tasks).filter(|(_, &x)| x == t).map(|(v, _)| v).collect();
        let mut c = vec![0.0; dim];
        for m in &members {
            c.iter_mut().zip(m.iter()).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|a| *a /= members.len() as f64);
        c
    };
    let centroids: Vec<Vec<f64>> = (0..k).map(|t| if present.contains(&t) { centroid(t) } else { Vec::new() }).collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (a, &ta) in present.iter().enumerate() {
        for &tb in &present[a + 1..] {
            inter += sq_dist(&centroids[ta], &centroids[tb]).sqrt();
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let intra = vectors
        .iter()
        .zip(tasks)
        .map(|(v, &t)| sq_dist(v, &centroids[t]).sqrt())
        .sum::<f64>()
        / vectors.len() as f64;
    let zero = vec![0.0; dim];
    let mean_displacement = vectors.iter().map(|v| sq_dist(v, &zero).sqrt()).sum::<f64>() / vectors.len() as f64;
    let diameter = (0..vectors.len())
        .into_par_iter()
        .map(|i| {
            (i + 1..vectors.len())
                .map(|j| sq_dist(&vectors[i], &vectors[j]).sqrt())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(SpreadStats {
        separation_ratio: if intra == 0.0 { f64::INFINITY } else { inter / intra },
        inter_centroid: inter,
        intra_spread: intra,
        mean_displacement,
        diameter,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadComparison {
    pub generated: SpreadStats,
    pub optimized: SpreadStats,
    /// Optimized mean displacement over the generated cloud's diameter.
    pub displacement_to_diameter: f64,
}

pub fn spread_comparison(generated: &ParamCloud, optimized: &[Vec<f64>], optimized_tasks: &[usize]) -> Result<SpreadComparison> {
    generated.validate()?;
    if optimized.len() != optimized_tasks.len() {
        return Err(Error::Parameter("optimized vectors and tasks are not aligned".into()));
    }
    let g = spread_stats(&generated.vectors, &generated.tasks)?;
    let o = spread_stats(optimized, optimized_tasks)?;
    Ok(SpreadComparison {
        displacement_to_diameter: if g.diameter == 0.0 { f64::INFINITY } else { o.mean_displacement / g.diameter },
        generated: g,
        optimized: o,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed, 0);
        (0..n).map(|_| Tensor::randn(&[d], 1.0, &mut r).into_data()).collect()
    }

    #[test]
    fn zero_vector_projects_to_zero() {
        let p = Projection::new(6, 3, ProjectionKind::Gaussian, 1).unwrap();
        assert_eq!(p.apply(&[0.0; 6]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn projection_is_linear() {
        let p = Projection::new(32, 8, ProjectionKind::Gaussian, 2).unwrap();
        let v = cloud(2, 32, 4);
        let sum: Vec<f64> = v[0].iter().zip(&v[1]).map(|(a, b)| a + b).collect();
        let lhs = p.apply(&sum).unwrap();
        let (a, b) = (p.apply(&v[0]).unwrap(), p.apply(&v[1]).unwrap());
        for i in 0..8 {
            assert!((lhs[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_full_rank_preserves_distances() {
        let v = cloud(10, 16, 5);
        let p = random_project(&v, 16, ProjectionKind::Orthonormal, 3).unwrap();
        assert!(p.audit.max < 1e-10, "{:?}", p.audit);
        assert_eq!(p.audit.pairs, 45);
    }

    #[test]
    fn projection_rejects_growth() {
        assert!(matches!(
            random_project(&cloud(3, 4, 0), 5, ProjectionKind::Gaussian, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn duplicate_clusters_have_perfect_neighbors() {
        let mut pts = Vec::new();
        let mut conds = Vec::new();
        for t in 0..3 {
            for _ in 0..6 {
                pts.push(vec![t as f64 * 5.0, 1.0]);
                let mut c = vec![0.0; 3];
                c[t] = 1.0;
                conds.push(c);
            }
        }
        let r = knn_consistency(&pts, &conds, 5, 1).unwrap();
        assert_eq!(r.knn_mean, 1.0);
        assert!(r.margin > 0.0);
        assert_eq!(r.knn_histogram.iter().sum::<u64>(), 90);
    }

    #[test]
    fn knn_margin_is_scale_invariant() {
        let pts = cloud(60, 5, 1);
        let conds = cloud(60, 4, 2);
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|x| x * 7.5).collect()).collect();
        let a = knn_consistency(&pts, &conds, 5, 3).unwrap();
        let b = knn_consistency(&scaled, &conds, 5, 3).unwrap();
        assert_eq!(a.margin, b.margin);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut r = rng::seeded(8, 0);
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let t = Tensor::randn(&[3], 1.0, &mut r).into_data();
                vec![10.0 * t[0], t[1], 0.1 * t[2]]
            })
            .collect();
        let coords = pca_2d(&pts).unwrap();
        let mean0 = pts.iter().map(|p| p[0]).sum::<f64>() / 100.0;
        for (c, p) in coords.iter().zip(&pts) {
            assert!((c[0].abs() - (p[0] - mean0).abs()).abs() < 0.5);
        }
    }

    #[test]
    fn identical_clouds_give_equal_ratios() {
        let v = cloud(20, 4, 6);
        let tasks: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let c = ParamCloud {
            vectors: v.clone(),
            conditions: v.clone(),
            tasks: tasks.clone(),
        };
        let s = spread_comparison(&c, &v, &tasks).unwrap();
        assert_eq!(s.generated, s.optimized);
        assert!(matches!(spread_stats(&v, &vec![0; 20]), Err(Error::Contract(_))));
    }

    #[test]
    fn bins_cover_closed_interval() {
        assert_eq!(cosine_bin(-1.0), 0);
        assert_eq!(cosine_bin(1.0), 49);
        assert_eq!(cosine_bin(-0.96), 1);
        assert_eq!(cosine_bin(0.0), 25);
    }
}
