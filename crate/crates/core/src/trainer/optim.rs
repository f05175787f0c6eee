use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    /// Heavy-ball SGD: `v ← m·v + g`, `w ← w − lr·v`.
    Sgd { lr: f64, momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings: {self}")))
        }
    }
}

impl fmt::Display for OptimizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => write!(f, "sgd(lr={lr}, momentum={momentum})"),
            OptimizerConfig::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => write!(f, "adamw(lr={lr}, beta1={beta1}, beta2={beta2}, eps={eps}, weight_decay={weight_decay})"),
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, slot_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        let zeros = || slot_sizes.iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            config,
            first: zeros(),
            second: match config {
                OptimizerConfig::AdamW { .. } => zeros(),
                OptimizerConfig::Sgd { .. } => Vec::new(),
            },
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment buffers of one parameter slot: the velocity for SGD, first
    /// and second moments for AdamW.
    pub fn state_mut(&mut self, slot: usize) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(2);
        if let Some(m) = self.first.get_mut(slot) {
            out.push(m);
        }
        if let Some(v) = self.second.get_mut(slot) {
            out.push(v);
        }
        out
    }

    /// Applies one update with the base rate multiplied by `lr_scale`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr_scale: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::mismatch("optimizer_step", self.first.len(), params.len().min(grads.len())));
        }
        for (s, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[s].len() || g.len() != p.len() {
                return Err(Error::mismatch("optimizer_step", self.first[s].len(), p.len()));
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                let lr = lr * lr_scale;
                for (s, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for ((w, v), gi) in p.iter_mut().zip(&mut self.first[s]).zip(*g) {
                        *v = momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerConfig::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let lr = lr * lr_scale;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (s, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[s], &mut self.second[s]);
                    for (((w, mi), vi), gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(*g) {
                        *w *= 1.0 - lr * weight_decay;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
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

    fn run(opt: &mut Optimizer, w: &mut Vec<f64>, g: &[f64], n: usize) {
        for _ in 0..n {
            opt.step(&mut [w.as_mut_slice()], &[g], 1.0).unwrap();
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed() {
        let cfg = OptimizerConfig::AdamW {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(cfg, &[3]).unwrap();
        let mut w = vec![1.0, -2.0, 3.0];
        run(&mut opt, &mut w, &[0.0; 3], 5);
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn decoupled_decay_single_step() {
        let cfg = OptimizerConfig::AdamW {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let mut opt = Optimizer::new(cfg, &[2]).unwrap();
        let mut w = vec![2.0, -4.0];
        run(&mut opt, &mut w, &[0.0; 2], 1);
        assert!((w[0] - 1.9).abs() < 1e-15 && (w[1] + 3.8).abs() < 1e-15, "{w:?}");
    }

    #[test]
    fn adam_step_is_scale_free() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut opt = Optimizer::new(OptimizerConfig::adamw(0.01), &[1]).unwrap();
            let cfg = OptimizerConfig::AdamW {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            };
            opt.config = cfg;
            let mut w = vec![0.0];
            run(&mut opt, &mut w, &[scale], 200);
            let before = w[0];
            run(&mut opt, &mut w, &[scale], 1);
            let step = before - w[0];
            assert!((step - 0.01).abs() < 1e-3 * 0.01 + 1e-9, "{scale}: {step}");
        }
    }

    #[test]
    fn state_buffers_per_slot() {
        let mut adam = Optimizer::new(OptimizerConfig::adamw(0.1), &[2, 3]).unwrap();
        assert_eq!(adam.state_mut(1).iter().map(|b| b.len()).collect::<Vec<_>>(), vec![3, 3]);
        let mut sgd = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.5 }, &[2]).unwrap();
        assert_eq!(sgd.state_mut(0).len(), 1);
        assert!(sgd.state_mut(4).is_empty());
    }

    #[test]
    fn sgd_heavy_ball() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.5 }, &[1]).unwrap();
        let mut w = vec![0.0];
        run(&mut opt, &mut w, &[1.0], 2);
        assert!((w[0] + 0.25).abs() < 1e-15);
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: -1.0, momentum: 0.5 }, &[1]).is_err());
    }
}
