use std::sync::Arc;

use proptest::prelude::*;

use hywu_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hywu_core::conflict::{cosine_statistics, GradientSample, PairMode};
use hywu_core::manifold::{kmeans, purity, random_project, ProjectionKind};
use hywu_core::rng;
use hywu_core::tokenizer::{detokenize, plan_layout, tokenize, AdapterSet, ModuleSpec};
use hywu_core::Tensor;

fn layout_strategy() -> impl Strategy<Value = (Vec<(usize, usize)>, usize, usize)> {
    (
        prop::collection::vec((2usize..=12, 2usize..=12), 1..=3),
        1usize..=4,
        prop::sample::select(vec![1usize, 2, 4]),
    )
}

fn filled(layout: &hywu_core::tokenizer::AdapterLayout, seed: u64) -> AdapterSet {
    let mut r = rng::seeded(seed, 1);
    let mut set = AdapterSet::zeros(layout);
    for p in set.layers.iter_mut().flatten() {
        p.a = Tensor::randn(p.a.shape(), 1.0, &mut r);
        p.b = Tensor::randn(p.b.shape(), 1.0, &mut r);
    }
    set
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn tokenize_round_trip_is_bit_exact((dims, layers, rank) in layout_strategy(), seed in any::<u64>()) {
        let modules: Vec<ModuleSpec> =
            dims.iter().enumerate().map(|(i, (a, b))| ModuleSpec::new(format!("m{i}"), *a, *b)).collect();
        let layout = Arc::new(plan_layout(&modules, layers, rank, None).unwrap());
        let set = filled(&layout, seed);
        let back = detokenize(&tokenize(&set, &layout).unwrap()).unwrap();
        for (p, q) in set.layers.iter().flatten().zip(back.layers.iter().flatten()) {
            prop_assert!(p.a.bit_eq(&q.a) && p.b.bit_eq(&q.b));
        }
        let [l, s, r, d] = layout.token_shape();
        let expected: usize = dims.iter().map(|(a, b)| layers * rank * (a + b)).sum();
        prop_assert_eq!(l * s * r * d, expected);
        prop_assert_eq!(layout.adapter_scalar_count(), expected);
    }

    #[test]
    fn cosine_stats_ignore_positive_scale(scales in prop::collection::vec(0.01f64..100.0, 12), seed in any::<u64>()) {
        let mut r = rng::seeded(seed, 2);
        let samples: Vec<GradientSample> = (0..12)
            .map(|i| GradientSample { task: i % 2, source: (i / 2) as u64, grad: Tensor::randn(&[7], 1.0, &mut r).into_data() })
            .collect();
        let scaled: Vec<GradientSample> = samples
            .iter()
            .zip(&scales)
            .map(|(s, k)| GradientSample { grad: s.grad.iter().map(|v| v * k).collect(), ..s.clone() })
            .collect();
        for mode in [PairMode::Exhaustive, PairMode::Matched] {
            let a = cosine_statistics(&samples, 2, mode).unwrap();
            let b = cosine_statistics(&scaled, 2, mode).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((a.mean_cos[i][j] - b.mean_cos[i][j]).abs() < 1e-12);
                    prop_assert_eq!(a.conflict_ratio[i][j], b.conflict_ratio[i][j]);
                }
            }
        }
    }
}

#[test]
fn negated_task_flips_cross_cosine() {
    let mut r = rng::seeded(9, 3);
    let mut samples = Vec::new();
    for k in 0..10u64 {
        let g = Tensor::randn(&[5], 1.0, &mut r).into_data();
        samples.push(GradientSample { task: 0, source: k, grad: g.clone() });
        samples.push(GradientSample { task: 1, source: k, grad: g.iter().map(|v| -v).collect() });
    }
    let s = cosine_statistics(&samples, 2, PairMode::Matched).unwrap();
    assert!((s.mean_cos[0][1] + 1.0).abs() < 1e-12);
    assert_eq!(s.conflict_ratio[0][1], 1.0);
    assert_eq!(s.mean_cos[0][1], s.mean_cos[1][0]);
}

#[test]
fn separated_blobs_are_recovered() {
    let mut r = rng::seeded(4, 4);
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for c in 0..3 {
        for _ in 0..30 {
            let mut p = Tensor::randn(&[6], 0.1, &mut r).into_data();
            p[c] += 5.0;
            pts.push(p);
            truth.push(c);
        }
    }
    let km = kmeans(&pts, 3, 1).unwrap();
    assert_eq!(purity(&km.labels, &truth), 1.0);
    assert_eq!(kmeans(&pts, 3, 1).unwrap().labels, km.labels);
}

#[test]
fn both_projection_kinds_keep_distances() {
    let mut r = rng::seeded(5, 5);
    let v: Vec<Vec<f64>> = (0..40).map(|_| Tensor::randn(&[256], 1.0, &mut r).into_data()).collect();
    for kind in [ProjectionKind::Gaussian, ProjectionKind::Orthonormal] {
        let p = random_project(&v, 128, kind, 3).unwrap();
        assert_eq!(p.audit.pairs, 40 * 39 / 2);
        assert!(p.audit.max < 0.3, "{kind:?} {:?}", p.audit);
    }
    assert!(random_project(&v, 512, ProjectionKind::Gaussian, 3).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let layout = Arc::new(plan_layout(&[ModuleSpec::new("w", 6, 4)], 3, 2, None).unwrap());
    let set = filled(&layout, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.hywu");
    let ck = Checkpoint::Adapters { layout, set };
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"HYWU");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}
