//! Central finite-difference checks of tape gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorState, ParamSet, ParamVars};
use crate::rng::{self, stream};
use crate::tasks::Instance;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{detokenize_on_tape, AdapterSet};
use crate::train::{pg_instance_loss, Experiment};

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Lower bound on the relative-error denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Floor {
    Absolute(f64),
    /// Fraction of the largest analytic gradient magnitude. Entries that
    /// cancel to near zero are then held to an absolute bound instead of a
    /// relative one.
    Relative(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub step: f64,
    /// Effective absolute floor.
    pub floor: f64,
    pub max_grad: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat offset of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Compares `grads` (one tensor per parameter, in set order) with central
/// differences of `loss` over every scalar in `params`.
pub fn check_params<F>(params: &ParamSet, grads: &[Tensor], step: f64, floor: Floor, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64> + Sync,
{
    if grads.len() != params.len() {
        return Err(Error::Contract("one gradient per parameter required".into()));
    }
    let coords: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(p, i)| {
            let mut probe = params.clone();
            let orig = probe.tensors()[p].data()[i];
            probe.tensors_mut()[p].data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    let max_grad = grads.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = match floor {
        Floor::Absolute(f) => f,
        Floor::Relative(frac) => frac * max_grad,
    };
    let mut report = GradCheckReport {
        checked: coords.len(),
        step,
        floor,
        max_grad,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (&(p, i), fd) in coords.iter().zip(&numeric) {
        let an = grads[p].data()[i];
        let rel = rel_error(an, *fd, floor);
        report.max_abs_error = report.max_abs_error.max((an - fd).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((params.names()[p].clone(), i));
        }
    }
    Ok(report)
}

fn tape_grads(tape: &Tape, loss: Var, p: &ParamVars) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    Ok(p.vars.iter().map(|&v| g.get_or_zeros(tape, v)).collect())
}

/// End-to-end check: generator → detokenize → frozen backbone → loss on one
/// instance, over every generator scalar.
pub fn check_generator(
    exp: &Experiment,
    state: &GeneratorState,
    inst: &Instance,
    step: f64,
    floor: Floor,
) -> Result<GradCheckReport> {
    let cond = exp.condition(inst);
    let run = |params: &ParamSet, trainable: bool| -> Result<(Tape, Var, ParamVars)> {
        let mut tape = Tape::new();
        let p = params.load(&mut tape, trainable);
        let probe = GeneratorState {
            params: params.clone(),
            ..state.clone()
        };
        let loss = pg_instance_loss(&mut tape, exp, &probe, &p, inst, &cond)?;
        Ok((tape, loss, p))
    };
    let (tape, loss, p) = run(&state.params, true)?;
    let grads = tape_grads(&tape, loss, &p)?;
    check_params(&state.params, &grads, step, floor, |ps| {
        let (tape, loss, _) = run(ps, false)?;
        Ok(tape.value(loss).item())
    })
}

/// Generator-only check: tokens → detokenize → `Σ ‖A·B − T‖²` against fixed
/// targets `T`, one per layer and module.
pub fn check_generator_tokens(
    state: &GeneratorState,
    conditions: &Tensor,
    targets: &[Vec<Tensor>],
    step: f64,
    floor: Floor,
) -> Result<GradCheckReport> {
    let run = |params: &ParamSet, trainable: bool| -> Result<(Tape, Var, ParamVars)> {
        let mut tape = Tape::new();
        let p = params.load(&mut tape, trainable);
        let probe = GeneratorState {
            params: params.clone(),
            ..state.clone()
        };
        let tokens = probe.generate_on_tape(&mut tape, &p, conditions)?;
        let lora = detokenize_on_tape(&mut tape, tokens, &state.layout)?;
        let mut total: Option<Var> = None;
        for (layer, tl) in lora.iter().zip(targets) {
            for (pair, t) in layer.iter().zip(tl) {
                let ab = tape.matmul(pair.a, pair.b)?;
                let tv = tape.constant(t.clone());
                let diff = tape.sub(ab, tv)?;
                let term = tape.sq_sum_scaled(diff, 1.0)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
        }
        let loss = total.ok_or_else(|| Error::Contract("no adapter modules".into()))?;
        Ok((tape, loss, p))
    };
    let (tape, loss, p) = run(&state.params, true)?;
    let grads = tape_grads(&tape, loss, &p)?;
    check_params(&state.params, &grads, step, floor, |ps| {
        let (tape, loss, _) = run(ps, false)?;
        Ok(tape.value(loss).item())
    })
}

/// Replaces the zero B head with Gaussian weights. A zero B head blocks every
/// trunk gradient, which would make a gradient check vacuous.
pub fn randomize_head_b(state: &mut GeneratorState, std: f64, seed: u64) {
    let mut r = rng::indexed(seed, stream::GRADIENTS, 0xB);
    for name in ["head_b.w", "head_b.b"] {
        if let Some(t) = state.params.get_mut(name) {
            *t = Tensor::randn(t.shape(), std, &mut r);
        }
    }
}

/// Moves a fresh generator to a well-conditioned check point: Gaussian
/// embedding of std `embed_std` and a nonzero B head.
pub fn prepare_check_point(state: &mut GeneratorState, embed_std: f64, head_b_std: f64, seed: u64) {
    randomize_head_b(state, head_b_std, seed);
    let mut r = rng::indexed(seed, stream::GRADIENTS, 0xE);
    if let Some(t) = state.params.get_mut("embed") {
        *t = Tensor::randn(t.shape(), embed_std, &mut r);
    }
}

/// Random targets shaped like the `A·B` products of `set`.
pub fn random_targets(set: &AdapterSet, std: f64, seed: u64) -> Vec<Vec<Tensor>> {
    let mut r = rng::indexed(seed, stream::GRADIENTS, 0x7);
    set.layers
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|p| Tensor::randn(&[p.a.shape()[0], p.b.shape()[1]], std, &mut r))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-8), 0.0);
        assert!((rel_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn quadratic_matches_exactly_enough() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_fn(&[3], |i| i as f64 + 0.5));
        let grads = vec![ps.tensors()[0].scale(2.0)];
        let r = check_params(&ps, &grads, 1e-3, Floor::Absolute(1e-8), |p| Ok(p.tensors()[0].sq_norm())).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::full(&[2], 1.0));
        let grads = vec![Tensor::full(&[2], 3.0)];
        let r = check_params(&ps, &grads, 1e-3, Floor::Absolute(1e-8), |p| Ok(p.tensors()[0].sq_norm())).unwrap();
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst.as_ref().unwrap().0, "x");
    }
}
