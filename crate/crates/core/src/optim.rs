//! First-order optimizers over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::check_len;

/// `params - lr * grads`, elementwise.
pub fn sgd_step(params: &[f64], grads: &[f64], lr: f64) -> Result<Vec<f64>> {
    if params.len() != grads.len() {
        return Err(Error::Layout(alloc::format!(
            "params have {} entries, grads {}",
            params.len(),
            grads.len()
        )));
    }
    Ok(params.iter().zip(grads).map(|(p, g)| p - lr * g).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case", tag = "kind"))]
pub enum OptimizerKind {
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Stateful optimizer: SGD with (optionally zero) momentum, or Adam.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
            OptimizerKind::Momentum { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            m: vec![0.0; n_params],
            v,
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("optimizer", params.len(), self.m.len())?;
        check_len("optimizer", grads.len(), self.m.len())?;
        self.t += 1;
        match self.kind {
            OptimizerKind::Momentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    *m = momentum * *m + g;
                    *p -= self.lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
                let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (libm::sqrt(vh) + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(&[1.0, 2.0], &[1.0, 1.0], 0.5).unwrap(), vec![0.5, 1.5]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[0.0, 0.0], 0.5).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[3.0, -4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert!(sgd_step(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.05, 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Optimizer::new(OptimizerKind::Momentum { momentum: 0.0 }, 0.5, 2);
        opt.step(&mut p, &[1.0, 1.0]).unwrap();
        assert_eq!(p, vec![0.5, 1.5]);
    }
}
