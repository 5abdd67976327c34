//! Invariant suite run by `hywu selfcheck`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::error::Result;
use crate::generator::{init_generator, GeneratorConfig};
use crate::gradcheck::{check_generator, check_generator_tokens, prepare_check_point, random_targets, Floor, GradCheckReport};
use crate::rng::{self, stream};
use crate::tasks::{make_opposing_pair, sample_balanced, ConditionFeaturizer, PairKind};
use crate::tensor::Tensor;
use crate::tokenizer::{detokenize, plan_layout, tokenize, AdapterSet, ModuleSpec};
use crate::train::Experiment;

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_FLOOR: Floor = Floor::Relative(1e-3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// A fuzzed layout: modules, layer count, rank.
pub type FuzzLayout = (Vec<ModuleSpec>, usize, usize);

/// `count` layouts with `d_in, d_out ∈ 2..=12`, `r ∈ {1,2,4}`, `l ∈ 1..=4`
/// and one to three modules.
pub fn fuzz_layouts(count: usize, seed: u64) -> Vec<FuzzLayout> {
    let mut r = rng::seeded(seed, stream::GRADIENTS);
    (0..count)
        .map(|_| {
            let modules = (0..r.random_range(1..=3))
                .map(|m| ModuleSpec::new(format!("m{m}"), r.random_range(2..=12), r.random_range(2..=12)))
                .collect();
            (modules, r.random_range(1..=4), [1, 2, 4][r.random_range(0..3)])
        })
        .collect()
}

fn random_set(layout: &crate::tokenizer::AdapterLayout, r: &mut rng::Rng) -> AdapterSet {
    let mut set = AdapterSet::zeros(layout);
    for p in set.layers.iter_mut().flatten() {
        p.a = Tensor::randn(p.a.shape(), 1.0, r);
        p.b = Tensor::randn(p.b.shape(), 1.0, r);
    }
    set
}

/// Bit-exact `detokenize∘tokenize` plus the scalar-count identity.
pub fn round_trip_check(count: usize, seed: u64) -> Result<(usize, Vec<String>)> {
    let mut r = rng::seeded(seed, stream::LORA_INIT);
    let mut failures = Vec::new();
    for (i, (modules, layers, rank)) in fuzz_layouts(count, seed).into_iter().enumerate() {
        let layout = Arc::new(plan_layout(&modules, layers, rank, None)?);
        let set = random_set(&layout, &mut r);
        let back = detokenize(&tokenize(&set, &layout)?)?;
        let [l, s, rr, d] = layout.token_shape();
        let bits_equal = set
            .flatten()
            .iter()
            .zip(back.flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !bits_equal || l * s * rr * d != layout.adapter_scalar_count() {
            failures.push(format!("layout {i}: {modules:?} l={layers} r={rank}"));
        }
    }
    Ok((count, failures))
}

/// Number of inputs whose injected output differs in any bit from the base
/// output under a freshly initialized generator.
pub fn zero_init_mismatches(cfg: &RunConfig, inputs: usize) -> Result<usize> {
    let exp = cfg.experiment()?;
    let state = exp.init_generator()?;
    let mut r = rng::seeded(cfg.seed, stream::EVAL_DATA);
    let data = sample_balanced(&exp.tasks, inputs.div_ceil(exp.tasks.len()), &mut r);
    let mut bad = 0;
    for inst in data.iter().take(inputs) {
        let set = detokenize(&state.generate(&exp.condition(inst))?)?;
        let x = inst.x_tensor();
        let instr = exp.instruction(inst);
        let base = exp.backbone.forward(&x, Some(&instr), None)?;
        let injected = exp.backbone.forward(&x, Some(&instr), Some(&set))?;
        if !base.bit_eq(&injected) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Width-4 two-layer tanh-residual backbone with rank 2 and segment 2,
/// under a one-head, two-block, hidden-8 generator.
pub fn tiny_experiment(seed: u64) -> Result<Experiment> {
    let bc = BackboneConfig {
        width: 4,
        layers: 2,
        instruction_width: 8,
        ..BackboneConfig::default()
    };
    let backbone = build_backbone(&bc, seed)?;
    let layout = Arc::new(backbone.adapter_layout(2, Some(2))?);
    let (p, m) = make_opposing_pair(PairKind::ScalePair, 4, 0.5, 8, seed)?;
    Ok(Experiment {
        featurizer: ConditionFeaturizer::new(4, 8, seed),
        backbone,
        tasks: vec![p, m],
        layout,
        generator: tiny_generator(),
        seed,
    })
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        hidden: 8,
        heads: 1,
        blocks: 2,
        condition_width: 8,
        init_std: 0.1,
        ..GeneratorConfig::default()
    }
}

/// End-to-end check through the tiny backbone (token shape `[2, 4, 2, 2]`).
pub fn end_to_end_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let exp = tiny_experiment(seed)?;
    let mut state = exp.init_generator()?;
    prepare_check_point(&mut state, 1.0, 0.03, seed);
    let inst = &sample_balanced(&exp.tasks, 1, &mut rng::seeded(seed, stream::TRAIN_DATA))[0];
    check_generator(&exp, &state, inst, GRADCHECK_STEP, GRADCHECK_FLOOR)
}

/// Generator-only check on a `4×6` module, token shape `[2, 5, 2, 2]`.
pub fn token_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let layout = Arc::new(plan_layout(&[ModuleSpec::new("m", 4, 6)], 2, 2, None)?);
    let mut state = init_generator(&tiny_generator(), layout.clone(), seed)?;
    prepare_check_point(&mut state, 1.0, 0.03, seed);
    let cond = Tensor::randn(&[2, 8], 1.0, &mut rng::seeded(seed, stream::FEATURIZER));
    let targets = random_targets(&AdapterSet::zeros(&layout), 1.0, seed);
    check_generator_tokens(&state, &cond, &targets, GRADCHECK_STEP, GRADCHECK_FLOOR)
}

pub fn run_selfcheck(seed: u64) -> Result<Vec<CheckLine>> {
    let (n, failures) = round_trip_check(128, seed)?;
    let mut lines = vec![CheckLine::new(
        "tokenizer round trip",
        failures.is_empty(),
        format!("{} of {n} layouts failed {:?}", failures.len(), failures),
    )];
    let bad = zero_init_mismatches(&RunConfig::default().with_seed(seed), 64)?;
    lines.push(CheckLine::new(
        "zero-init equivalence",
        bad == 0,
        format!("{bad} of 64 inputs differ from the base output"),
    ));
    for (name, report) in [
        ("gradient check end to end", end_to_end_gradcheck(seed)?),
        ("gradient check tokens s=5", token_gradcheck(seed)?),
    ] {
        lines.push(CheckLine::new(
            name,
            report.passes(GRADCHECK_TOL),
            format!(
                "{} scalars, max rel error {:.3e}, worst {:?}",
                report.checked, report.max_rel_error, report.worst
            ),
        ));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuzz_layouts_cover_the_ranges() {
        let ls = fuzz_layouts(200, 3);
        assert!(ls.iter().all(|(m, l, r)| (1..=4).contains(l) && [1, 2, 4].contains(r) && !m.is_empty()));
        assert!(ls.iter().any(|(_, l, _)| *l == 4));
        assert!(ls.iter().flat_map(|(m, _, _)| m).any(|m| m.d_in == 12 || m.d_out == 12));
    }

    #[test]
    fn round_trip_small() {
        let (n, f) = round_trip_check(20, 1).unwrap();
        assert_eq!(n, 20);
        assert!(f.is_empty(), "{f:?}");
    }

    #[test]
    fn tiny_shapes() {
        assert_eq!(tiny_experiment(1).unwrap().layout.token_shape(), [2, 4, 2, 2]);
    }
}
