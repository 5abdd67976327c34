//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use hywu_core::config::RunConfig;
use hywu_core::rng;
use hywu_core::tokenizer::{plan_layout, AdapterLayout, AdapterSet, ModuleSpec};
use hywu_core::train::Experiment;
use hywu_core::Tensor;

pub fn square(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, n], 1.0, &mut rng::seeded(seed, 0))
}

/// Two modules over four layers, rank 4.
pub fn layout() -> Arc<AdapterLayout> {
    Arc::new(plan_layout(&[ModuleSpec::new("q", 32, 32), ModuleSpec::new("o", 32, 64)], 4, 4, None).expect("layout"))
}

pub fn adapters(layout: &AdapterLayout) -> AdapterSet {
    let mut r = rng::seeded(1, 1);
    let mut set = AdapterSet::zeros(layout);
    for p in set.layers.iter_mut().flatten() {
        p.a = Tensor::randn(p.a.shape(), 1.0, &mut r);
        p.b = Tensor::randn(p.b.shape(), 1.0, &mut r);
    }
    set
}

pub fn experiment() -> Experiment {
    RunConfig::default().experiment().expect("default config")
}
