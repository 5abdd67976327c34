//! Per-sample gradient conflict statistics on a shared adapter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{load_adapters, FrozenBackbone};
use crate::error::{Error, Result};
use crate::manifold::{cosine_bin, kmeans, HISTOGRAM_BINS};
use crate::rng::{self, stream};
use crate::tasks::{Instance, TaskSpec};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{AdapterLayout, AdapterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSample {
    pub task: usize,
    /// Hash of the input bits; equal for instances that share `x`.
    pub source: u64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterPoint {
    /// `A = 0`, `B = 0`. Every LoRA gradient vanishes here.
    Zero,
    /// `A = [I_r; 0]`, `B = 0`: still `ΔW = 0`, but `∂L/∂B` is informative.
    TruncatedIdentity,
    Given(AdapterSet),
}

impl AdapterPoint {
    pub fn materialize(&self, layout: &AdapterLayout) -> AdapterSet {
        match self {
            AdapterPoint::Zero => AdapterSet::zeros(layout),
            AdapterPoint::TruncatedIdentity => {
                let mut set = AdapterSet::zeros(layout);
                for layer in &mut set.layers {
                    for p in layer {
                        let (rows, r) = (p.a.shape()[0], p.a.shape()[1]);
                        for i in 0..rows.min(r) {
                            p.a.set(i, i, 1.0);
                        }
                    }
                }
                set
            }
            AdapterPoint::Given(set) => set.clone(),
        }
    }
}

/// FNV-1a over the bit patterns of `x`.
pub fn source_key(x: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub index: usize,
    pub task: usize,
    pub reason: String,
}

/// Single-example loss gradients with respect to every `(A, B)` entry at
/// `point`, flattened in [`AdapterSet::flatten`] order.
pub fn collect_gradients(
    backbone: &FrozenBackbone,
    tasks: &[TaskSpec],
    point: &AdapterSet,
    dataset: &[Instance],
) -> Result<(Vec<GradientSample>, Vec<Rejected>)> {
    let results: Vec<Result<(Vec<f64>, f64)>> = dataset
        .par_iter()
        .map(|inst| {
            let mut tape = Tape::new();
            let lora = load_adapters(&mut tape, point, true);
            let weights = backbone.weight_vars(&mut tape);
            let x = tape.constant(inst.x_tensor());
            let e = tasks[inst.task].embedding.clone();
            let e = tape.constant(Tensor::new(vec![1, e.len()], e)?);
            let pred = backbone.forward_on_tape(&mut tape, &weights, x, Some(e), Some(&lora))?;
            let y = tape.constant(inst.y_tensor());
            let diff = tape.sub(pred, y)?;
            let loss = tape.sq_sum_scaled(diff, 1.0)?;
            let g = tape.backward(loss)?;
            let flat = lora
                .iter()
                .flatten()
                .flat_map(|p| {
                    let a = g.get_or_zeros(&tape, p.a).into_data();
                    let b = g.get_or_zeros(&tape, p.b).into_data();
                    a.into_iter().chain(b)
                })
                .collect();
            Ok((flat, tape.value(loss).item()))
        })
        .collect();
    let mut samples = Vec::with_capacity(dataset.len());
    let mut rejected = Vec::new();
    for (index, (inst, r)) in dataset.iter().zip(results).enumerate() {
        let (grad, loss) = r?;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            log::warn!("gradient sample {index} (task {}) is not finite; rejected", inst.task);
            rejected.push(Rejected {
                index,
                task: inst.task,
                reason: "non-finite gradient".into(),
            });
            continue;
        }
        samples.push(GradientSample {
            task: inst.task,
            source: source_key(&inst.x),
            grad,
        });
    }
    Ok((samples, rejected))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Every cross-task pair.
    Exhaustive,
    /// Cross-task pairs only between samples that share an input.
    Matched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub tasks: usize,
    pub mean_cos: Vec<Vec<f64>>,
    pub conflict_ratio: Vec<Vec<f64>>,
    pub pair_counts: Vec<Vec<u64>>,
    /// Indices of zero-norm samples left out of every pair.
    pub excluded: Vec<usize>,
}

struct Unit {
    task: usize,
    source: u64,
    dir: Vec<f64>,
}

fn unit_vectors(samples: &[GradientSample]) -> Result<(Vec<Unit>, Vec<usize>)> {
    let dim = samples.first().map_or(0, |s| s.grad.len());
    let mut units = Vec::with_capacity(samples.len());
    let mut excluded = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.grad.len() != dim {
            return Err(Error::Parameter("gradient samples differ in dimension".into()));
        }
        let n = s.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            excluded.push(i);
            continue;
        }
        units.push(Unit {
            task: s.task,
            source: s.source,
            dir: s.grad.iter().map(|v| v / n).collect(),
        });
    }
    if !excluded.is_empty() {
        log::warn!("{} zero-norm gradient samples excluded", excluded.len());
    }
    Ok((units, excluded))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosines of the pairs that contribute to task pair `(i, j)`, in a fixed
/// order: distinct pairs for `i == j`, cross pairs (or matched cross pairs)
/// otherwise.
fn pair_cosines(units: &[Unit], i: usize, j: usize, mode: PairMode) -> Vec<f64> {
    let a: Vec<&Unit> = units.iter().filter(|u| u.task == i).collect();
    let b: Vec<&Unit> = units.iter().filter(|u| u.task == j).collect();
    let mut out = Vec::new();
    if i == j {
        for p in 0..a.len() {
            for q in p + 1..a.len() {
                out.push(dot(&a[p].dir, &a[q].dir));
            }
        }
    } else {
        for u in &a {
            for v in &b {
                if mode == PairMode::Exhaustive || u.source == v.source {
                    out.push(dot(&u.dir, &v.dir));
                }
            }
        }
    }
    out
}

pub fn cosine_statistics(samples: &[GradientSample], tasks: usize, mode: PairMode) -> Result<CosineStats> {
    let (units, excluded) = unit_vectors(samples)?;
    for t in 0..tasks {
        let n = units.iter().filter(|u| u.task == t).count();
        if n < 2 {
            return Err(Error::Parameter(format!("task {t} has {n} usable gradient samples, need 2")));
        }
    }
    let cells: Vec<(usize, usize)> = (0..tasks).flat_map(|i| (i..tasks).map(move |j| (i, j))).collect();
    let stats: Vec<(f64, f64, u64)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let cos = pair_cosines(&units, i, j, mode);
            let n = cos.len() as u64;
            if n == 0 {
                return (f64::NAN, f64::NAN, 0);
            }
            let mean = cos.iter().sum::<f64>() / n as f64;
            let neg = cos.iter().filter(|c| **c < 0.0).count() as f64 / n as f64;
            (mean, neg, n)
        })
        .collect();
    let mut mean_cos = vec![vec![0.0; tasks]; tasks];
    let mut conflict_ratio = vec![vec![0.0; tasks]; tasks];
    let mut pair_counts = vec![vec![0u64; tasks]; tasks];
    for (&(i, j), &(m, r, n)) in cells.iter().zip(&stats) {
        for (a, b) in [(i, j), (j, i)] {
            mean_cos[a][b] = m;
            conflict_ratio[a][b] = r;
            pair_counts[a][b] = n;
        }
    }
    Ok(CosineStats {
        tasks,
        mean_cos,
        conflict_ratio,
        pair_counts,
        excluded,
    })
}

/// 50-bin cosine histogram over `[−1, 1]` for task pair `(i, j)`.
pub fn pair_histogram(samples: &[GradientSample], i: usize, j: usize, mode: PairMode) -> Result<Vec<u64>> {
    for t in [i, j] {
        if !samples.iter().any(|s| s.task == t) {
            return Err(Error::Parameter(format!("task {t} has no gradient samples")));
        }
    }
    let (units, _) = unit_vectors(samples)?;
    let mut h = vec![0u64; HISTOGRAM_BINS];
    for c in pair_cosines(&units, i, j, mode) {
        h[cosine_bin(c)] += 1;
    }
    Ok(h)
}

/// Labels tasks from a `K×K` similarity matrix: affinity `(1 + s)/2`,
/// top-`k` eigenvectors of `D^{-1/2} A D^{-1/2}` (the bottom of the
/// normalized Laplacian) by subspace iteration, then seeded k-means on the
/// row-normalized embedding. Labels are renumbered by first appearance.
pub fn spectral_cluster(similarity: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = similarity.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("{k} clusters for {n} tasks")));
    }
    if similarity.iter().any(|row| row.len() != n) {
        return Err(Error::Parameter("similarity matrix is not square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (similarity[i][j] - similarity[j][i]).abs() > 1e-12 {
                return Err(Error::Parameter("similarity matrix is not symmetric".into()));
            }
        }
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let aff: Vec<Vec<f64>> = similarity
        .iter()
        .map(|row| row.iter().map(|s| ((1.0 + s) / 2.0).max(0.0)).collect())
        .collect();
    let deg: Vec<f64> = aff.iter().map(|row| row.iter().sum::<f64>()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| if *d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    // shifted by I so every eigenvalue is nonnegative and the top-k are dominant
    let m = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        inv_sqrt[i] * aff[i][j] * inv_sqrt[j] + if i == j { 1.0 } else { 0.0 }
    });
    let mut r = rng::seeded(seed, stream::SPECTRAL);
    let mut q = orthonormalize(&Tensor::randn(&[n, k], 1.0, &mut r));
    for _ in 0..2000 {
        let next = orthonormalize(&m.matmul(&q)?);
        let moved = next.sub(&q)?.sq_norm();
        q = next;
        if moved < 1e-24 {
            break;
        }
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..k).map(|j| q.at(i, j)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                row
            } else {
                row.iter().map(|v| v / norm).collect()
            }
        })
        .collect();
    let km = kmeans(&rows, k, seed)?;
    Ok(relabel(&km.labels))
}

/// Thin QR via modified Gram–Schmidt; columns are also sign-fixed so the
/// iteration cannot oscillate.
fn orthonormalize(t: &Tensor) -> Tensor {
    let (n, k) = (t.shape()[0], t.shape()[1]);
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| t.at(i, j)).collect()).collect();
    for j in 0..k {
        for p in 0..j {
            let d = dot(&cols[j], &cols[p]);
            let (head, tail) = cols.split_at_mut(j);
            tail[0].iter_mut().zip(&head[p]).for_each(|(x, q)| *x -= d * q);
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        let lead = cols[j].iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            cols[j].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Tensor::from_fn(&[n, k], |idx| cols[idx % k][idx / k])
}

/// Renumbers labels in order of first appearance.
pub fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Two tasks over a shared direction `v`: task 0 samples align with `v`;
/// the first half of task 1 aligns with `v`, the second half with `−v`.
/// Each sample adds a small orthogonal perturbation.
pub fn half_aligned_samples(dim: usize, per_task: usize, noise: f64, seed: u64) -> Vec<GradientSample> {
    let mut r = rng::indexed(seed, stream::GRADIENTS, 0x4A);
    let v = {
        let t = Tensor::randn(&[dim], 1.0, &mut r);
        let n = t.sq_norm().sqrt();
        t.scale(1.0 / n).into_data()
    };
    let mut out = Vec::with_capacity(2 * per_task);
    for task in 0..2 {
        for i in 0..per_task {
            let sign = if task == 1 && i >= per_task / 2 { -1.0 } else { 1.0 };
            let mut e = Tensor::randn(&[dim], noise, &mut r).into_data();
            let along = dot(&e, &v);
            e.iter_mut().zip(&v).for_each(|(x, vv)| *x -= along * vv);
            let grad = v.iter().zip(&e).map(|(a, b)| sign * a + b).collect();
            out.push(GradientSample {
                task,
                source: (task * per_task + i) as u64,
                grad,
            });
        }
    }
    out
}

/// Everything the gradient analysis reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub mode: PairMode,
    pub stats: CosineStats,
    /// `(i, j, counts)` for each requested task pair.
    pub histograms: Vec<(usize, usize, Vec<u64>)>,
    pub cluster_labels: Vec<usize>,
    pub rejected: Vec<Rejected>,
}

pub fn conflict_report(
    samples: &[GradientSample],
    tasks: usize,
    mode: PairMode,
    histogram_pairs: &[(usize, usize)],
    clusters: usize,
    seed: u64,
    rejected: Vec<Rejected>,
) -> Result<ConflictReport> {
    let stats = cosine_statistics(samples, tasks, mode)?;
    let histograms = histogram_pairs
        .iter()
        .map(|&(i, j)| pair_histogram(samples, i, j, mode).map(|h| (i, j, h)))
        .collect::<Result<_>>()?;
    let cluster_labels = spectral_cluster(&stats.mean_cos, clusters.min(tasks), seed)?;
    Ok(ConflictReport {
        mode,
        stats,
        histograms,
        cluster_labels,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(task: usize, source: u64, grad: &[f64]) -> GradientSample {
        GradientSample {
            task,
            source,
            grad: grad.to_vec(),
        }
    }

    #[test]
    fn duplicates_and_negatives() {
        let s = vec![
            sample(0, 1, &[1.0, 2.0]),
            sample(0, 2, &[1.0, 2.0]),
            sample(1, 1, &[-1.0, -2.0]),
            sample(1, 2, &[-2.0, -4.0]),
        ];
        let st = cosine_statistics(&s, 2, PairMode::Exhaustive).unwrap();
        assert!((st.mean_cos[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(st.conflict_ratio[0][0], 0.0);
        assert!((st.mean_cos[0][1] + 1.0).abs() < 1e-15);
        assert_eq!(st.conflict_ratio[0][1], 1.0);
        assert_eq!(st.pair_counts[0][1], 4);
        assert_eq!(st.pair_counts[0][0], 1);
        let m = cosine_statistics(&s, 2, PairMode::Matched).unwrap();
        assert_eq!(m.pair_counts[1][0], 2);
    }

    #[test]
    fn zero_norm_samples_are_excluded() {
        let s = vec![
            sample(0, 0, &[1.0, 0.0]),
            sample(0, 1, &[0.0, 0.0]),
            sample(0, 2, &[0.0, 1.0]),
            sample(1, 3, &[1.0, 1.0]),
            sample(1, 4, &[1.0, -1.0]),
        ];
        let st = cosine_statistics(&s, 2, PairMode::Exhaustive).unwrap();
        assert_eq!(st.excluded, vec![1]);
        assert_eq!(st.pair_counts[0][0], 1);
    }

    #[test]
    fn too_few_samples() {
        let s = vec![sample(0, 0, &[1.0]), sample(1, 0, &[1.0]), sample(1, 1, &[1.0])];
        assert!(matches!(cosine_statistics(&s, 2, PairMode::Exhaustive), Err(Error::Parameter(_))));
    }

    #[test]
    fn histogram_of_duplicates_is_top_bin() {
        let s: Vec<_> = (0..4).map(|i| sample(i % 2, i as u64, &[0.5, 0.5])).collect();
        let h = pair_histogram(&s, 0, 1, PairMode::Exhaustive).unwrap();
        assert_eq!(h[49], 4);
        assert_eq!(h.iter().sum::<u64>(), 4);
        assert!(pair_histogram(&s, 0, 3, PairMode::Exhaustive).is_err());
    }

    #[test]
    fn spectral_trivial_cases() {
        let sim = vec![vec![1.0, 0.2, -0.3], vec![0.2, 1.0, 0.1], vec![-0.3, 0.1, 1.0]];
        assert_eq!(spectral_cluster(&sim, 1, 0).unwrap(), vec![0, 0, 0]);
        assert_eq!(spectral_cluster(&sim, 3, 0).unwrap(), vec![0, 1, 2]);
        assert!(spectral_cluster(&sim, 4, 0).is_err());
    }

    #[test]
    fn spectral_recovers_two_blocks() {
        let block = [0, 0, 1, 1, 0, 1];
        let sim: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| if block[i] == block[j] { 1.0 } else { -1.0 }).collect())
            .collect();
        assert_eq!(spectral_cluster(&sim, 2, 4).unwrap(), relabel(&block));
    }

    #[test]
    fn truncated_identity_point() {
        let layout = crate::tokenizer::plan_layout(&[crate::tokenizer::ModuleSpec::new("w", 4, 4)], 1, 2, None).unwrap();
        let set = AdapterPoint::TruncatedIdentity.materialize(&layout);
        assert_eq!(set.layers[0][0].a.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(set.layers[0][0].b.sq_norm(), 0.0);
    }

    #[test]
    fn source_key_distinguishes_inputs() {
        assert_eq!(source_key(&[1.0, 2.0]), source_key(&[1.0, 2.0]));
        assert_ne!(source_key(&[1.0, 2.0]), source_key(&[2.0, 1.0]));
    }
}
