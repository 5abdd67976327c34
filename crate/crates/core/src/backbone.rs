//! Small frozen backbone with LoRA injection points.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{plan_layout, AdapterLayout, AdapterSet, LoraVars, ModuleSpec};

/// Whether the task instruction can reach the backbone input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictMode {
    /// The instruction only reaches the generator's condition path.
    StrictConflict,
    /// The instruction embedding is concatenated to the input.
    SoftConflict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    pub layers: usize,
    pub mode: ConflictMode,
    pub activation: Activation,
    /// Adds the block input back onto the activated output.
    pub residual: bool,
    /// Scale of the Gaussian perturbation around identity weights.
    pub init_noise: f64,
    /// LoRA scale.
    pub gamma: f64,
    /// Width of the instruction embedding (soft-conflict mode only).
    pub instruction_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 8,
            layers: 2,
            mode: ConflictMode::StrictConflict,
            activation: Activation::Tanh,
            residual: true,
            init_noise: 0.01,
            gamma: 1.0,
            instruction_width: 8,
        }
    }
}

impl BackboneConfig {
    /// Single identity-activated layer without residual: `forward(x) = x·W`.
    pub fn linear(width: usize) -> Self {
        Self {
            width,
            layers: 1,
            activation: Activation::Identity,
            residual: false,
            ..Self::default()
        }
    }

    pub fn is_linear_mode(&self) -> bool {
        self.layers == 1 && self.activation == Activation::Identity && !self.residual
    }
}

/// Immutable backbone. Nothing in this crate hands out mutable access to the
/// weights after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    weights: Vec<Tensor>,
    instruction_proj: Option<Tensor>,
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<FrozenBackbone> {
    if config.width < 2 || config.layers == 0 {
        return Err(Error::Parameter(format!(
            "backbone needs width >= 2 and layers >= 1, got {} and {}",
            config.width, config.layers
        )));
    }
    if !config.gamma.is_finite() || !config.init_noise.is_finite() {
        return Err(Error::Parameter("non-finite backbone scale".into()));
    }
    let mut rng = rng::seeded(seed, stream::BACKBONE);
    let w = config.width;
    let weights = (0..config.layers)
        .map(|_| {
            Tensor::eye(w)
                .add(&Tensor::randn(&[w, w], config.init_noise, &mut rng))
                .expect("square")
        })
        .collect();
    let instruction_proj = match config.mode {
        ConflictMode::SoftConflict => Some(Tensor::randn(
            &[config.instruction_width, w],
            1.0 / (config.instruction_width as f64).sqrt(),
            &mut rng,
        )),
        ConflictMode::StrictConflict => None,
    };
    Ok(FrozenBackbone {
        config: config.clone(),
        weights,
        instruction_proj,
    })
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Adapted modules of one block.
    pub fn module_specs(&self) -> Vec<ModuleSpec> {
        vec![ModuleSpec::new("w", self.config.width, self.config.width)]
    }

    pub fn adapter_layout(&self, rank: usize, segment: Option<usize>) -> Result<AdapterLayout> {
        plan_layout(&self.module_specs(), self.config.layers, rank, segment)
    }

    /// SHA-256 over every weight's bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.iter().chain(self.instruction_proj.iter()) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Loads the frozen weights as tape constants.
    pub fn weight_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|w| tape.constant(w.clone())).collect()
    }

    /// Forward pass on a tape. `weights` are usually [`Self::weight_vars`];
    /// full fine-tuning passes trainable copies instead.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        weights: &[Var],
        x: Var,
        instruction: Option<Var>,
        adapters: Option<&[Vec<LoraVars>]>,
    ) -> Result<Var> {
        let w = self.config.width;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != w {
            return Err(dim_err("backbone", format!("input {:?}, width {}", xs, w)));
        }
        if weights.len() != self.config.layers {
            return Err(dim_err("backbone", "weight count differs from layer count"));
        }
        if let Some(ad) = adapters {
            if ad.len() != self.config.layers || ad.iter().any(|l| l.len() != 1) {
                return Err(dim_err("backbone", "adapter set does not match backbone layers"));
            }
            for layer in ad {
                let (sa, sb) = (tape.shape(layer[0].a), tape.shape(layer[0].b));
                if sa.len() != 2 || sa[0] != w || sb.len() != 2 || sb[1] != w || sa[1] != sb[0] {
                    return Err(dim_err("backbone", format!("adapter shapes A {:?}, B {:?}", sa, sb)));
                }
            }
        }
        let mut h = x;
        for (li, &wv) in weights.iter().enumerate() {
            let mut z = tape.matmul(h, wv)?;
            if li == 0 {
                if let (Some(proj), Some(e)) = (&self.instruction_proj, instruction) {
                    let p = tape.constant(proj.clone());
                    let ez = tape.matmul(e, p)?;
                    z = tape.add(z, ez)?;
                }
            }
            if let Some(ad) = adapters {
                let lora = ad[li][0];
                let ha = tape.matmul(h, lora.a)?;
                let hab = tape.matmul(ha, lora.b)?;
                let scaled = tape.scale(hab, self.config.gamma);
                z = tape.add(z, scaled)?;
            }
            let act = match self.config.activation {
                Activation::Identity => z,
                Activation::Tanh => tape.tanh(z),
            };
            h = if self.config.residual { tape.add(h, act)? } else { act };
        }
        Ok(h)
    }

    /// Plain evaluation `[batch×w] -> [batch×w]`.
    pub fn forward(&self, x: &Tensor, instruction: Option<&Tensor>, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ev = instruction.map(|e| tape.constant(e.clone()));
        let weights = self.weight_vars(&mut tape);
        let ad = adapters.map(|set| constant_adapters(&mut tape, set));
        let out = self.forward_on_tape(&mut tape, &weights, xv, ev, ad.as_deref())?;
        Ok(tape.value(out).clone())
    }
}

/// Loads an adapter set as tape constants.
pub fn constant_adapters(tape: &mut Tape, set: &AdapterSet) -> Vec<Vec<LoraVars>> {
    load_adapters(tape, set, false)
}

pub fn load_adapters(tape: &mut Tape, set: &AdapterSet, trainable: bool) -> Vec<Vec<LoraVars>> {
    set.layers
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|p| LoraVars {
                    a: tape.leaf(p.a.clone(), trainable),
                    b: tape.leaf(p.b.clone(), trainable),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::LoraPair;

    fn rand_x(n: usize, w: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, w], 1.0, &mut rng::seeded(seed, 99))
    }

    #[test]
    fn linear_mode_without_noise_is_identity() {
        let cfg = BackboneConfig {
            init_noise: 0.0,
            ..BackboneConfig::linear(4)
        };
        let bb = build_backbone(&cfg, 3).unwrap();
        let x = rand_x(5, 4, 1);
        assert!(bb.forward(&x, None, None).unwrap().bit_eq(&x));
    }

    #[test]
    fn tanh_block_without_noise_is_x_plus_tanh_x() {
        let cfg = BackboneConfig {
            init_noise: 0.0,
            layers: 1,
            width: 4,
            ..BackboneConfig::default()
        };
        let bb = build_backbone(&cfg, 3).unwrap();
        let x = rand_x(3, 4, 2);
        let y = bb.forward(&x, None, None).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, a + a.tanh());
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = BackboneConfig::default();
        assert_eq!(build_backbone(&cfg, 11).unwrap(), build_backbone(&cfg, 11).unwrap());
        assert_ne!(build_backbone(&cfg, 11).unwrap(), build_backbone(&cfg, 12).unwrap());
    }

    #[test]
    fn strict_mode_ignores_instruction() {
        let bb = build_backbone(&BackboneConfig::default(), 1).unwrap();
        let x = rand_x(2, 8, 3);
        let e1 = rand_x(2, 8, 4);
        let e2 = rand_x(2, 8, 5);
        let y1 = bb.forward(&x, Some(&e1), None).unwrap();
        let y2 = bb.forward(&x, Some(&e2), None).unwrap();
        assert!(y1.bit_eq(&y2));
    }

    #[test]
    fn soft_mode_reads_instruction() {
        let cfg = BackboneConfig {
            mode: ConflictMode::SoftConflict,
            ..BackboneConfig::default()
        };
        let bb = build_backbone(&cfg, 1).unwrap();
        let x = rand_x(2, 8, 3);
        let y1 = bb.forward(&x, Some(&rand_x(2, 8, 4)), None).unwrap();
        let y2 = bb.forward(&x, Some(&rand_x(2, 8, 5)), None).unwrap();
        assert!(!y1.bit_eq(&y2));
    }

    #[test]
    fn zero_b_and_zero_gamma_match_base() {
        let bb = build_backbone(&BackboneConfig::default(), 7).unwrap();
        let layout = bb.adapter_layout(2, None).unwrap();
        let mut set = AdapterSet::zeros(&layout);
        for layer in &mut set.layers {
            layer[0].a = Tensor::randn(&[8, 2], 1.0, &mut rng::seeded(5, 1));
        }
        let x = rand_x(4, 8, 9);
        let base = bb.forward(&x, None, None).unwrap();
        assert_eq!(bb.forward(&x, None, Some(&set)).unwrap(), base);

        let cfg = BackboneConfig {
            gamma: 0.0,
            ..BackboneConfig::default()
        };
        let bb0 = build_backbone(&cfg, 7).unwrap();
        for layer in &mut set.layers {
            layer[0].b = Tensor::randn(&[2, 8], 1.0, &mut rng::seeded(6, 1));
        }
        assert_eq!(bb0.forward(&x, None, Some(&set)).unwrap(), bb0.forward(&x, None, None).unwrap());
    }

    #[test]
    fn dense_materialization_oracle() {
        let bb = build_backbone(&BackboneConfig::linear(4), 2).unwrap();
        let mut r = rng::seeded(8, 8);
        let pair = LoraPair {
            a: Tensor::randn(&[4, 2], 1.0, &mut r),
            b: Tensor::randn(&[2, 4], 1.0, &mut r),
        };
        let set = AdapterSet { layers: vec![vec![pair.clone()]] };
        let x = rand_x(3, 4, 10);
        let got = bb.forward(&x, None, Some(&set)).unwrap();
        // x·(W + AB) with every entry summed by hand
        let w = &bb.weights()[0];
        for i in 0..3 {
            for j in 0..4 {
                let mut want = 0.0;
                for k in 0..4 {
                    let mut ab = 0.0;
                    for p in 0..2 {
                        ab += pair.a.at(k, p) * pair.b.at(p, j);
                    }
                    want += x.at(i, k) * (w.at(k, j) + ab);
                }
                assert!((got.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn superposition_in_linear_mode() {
        let bb = build_backbone(&BackboneConfig::linear(6), 4).unwrap();
        let mut r = rng::seeded(1, 1);
        let a = Tensor::randn(&[6, 3], 1.0, &mut r);
        let b1 = Tensor::randn(&[3, 6], 1.0, &mut r);
        let b2 = Tensor::randn(&[3, 6], 1.0, &mut r);
        let mk = |b: Tensor| AdapterSet {
            layers: vec![vec![LoraPair { a: a.clone(), b }]],
        };
        let x = rand_x(4, 6, 2);
        let f12 = bb.forward(&x, None, Some(&mk(b1.add(&b2).unwrap()))).unwrap();
        let f1 = bb.forward(&x, None, Some(&mk(b1))).unwrap();
        let f2 = bb.forward(&x, None, Some(&mk(b2))).unwrap();
        let f0 = bb.forward(&x, None, None).unwrap();
        let rhs = f1.add(&f2).unwrap().sub(&f0).unwrap();
        for (p, q) in f12.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_adapter_shape_is_dimension_error() {
        let bb = build_backbone(&BackboneConfig::linear(4), 2).unwrap();
        let set = AdapterSet {
            layers: vec![vec![LoraPair::zeros(3, 4, 2)]],
        };
        let x = rand_x(1, 4, 1);
        assert!(matches!(bb.forward(&x, None, Some(&set)), Err(Error::Dimension { .. })));
    }
}
