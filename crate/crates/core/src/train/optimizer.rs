use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, or plain gradient descent.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config: config.clone(),
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `names` labels parameters in error messages.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Parameter("optimizer parameter count changed".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Parameter(format!(
                    "gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let c = &self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= c.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["p".into()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[3], |i| i as f64 - 1.0)];
        let before = p[0].clone();
        let mut opt = Optimizer::new(&OptimizerConfig::default(), &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])], &names()).unwrap();
        }
        assert!(p[0].bit_eq(&before));
    }

    #[test]
    fn hand_stepped_adam_reference() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            ..OptimizerConfig::default()
        };
        let g = 0.5;
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::new(&cfg, &p);
        // reference: scalar Adam written out step by step
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=4 {
            opt.step(&mut p, &[Tensor::scalar(g)], &names()).unwrap();
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(p[0].item(), x);
        }
        // constant gradient: every bias-corrected step has magnitude ≈ lr
        assert!((1.0 - p[0].item() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.25,
            ..OptimizerConfig::default()
        };
        let mut p = vec![Tensor::from_fn(&[2], |i| i as f64)];
        let mut opt = Optimizer::new(&cfg, &p);
        let g = Tensor::from_fn(&[2], |i| 1.0 + i as f64);
        opt.step(&mut p, std::slice::from_ref(&g), &names()).unwrap();
        assert_eq!(p[0].data(), &[0.0 - 0.25, 1.0 - 0.5]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Optimizer::new(&OptimizerConfig::default(), &p);
        let g = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(
            opt.step(&mut p, &[g], &names()),
            Err(Error::NonFiniteGradient(_))
        ));
    }
}
