use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adaptive moments, beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
    /// `p <- p - lr * g`.
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer `{s}` (adam|sgd)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![], v: vec![] }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.t as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        *pv -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_plain_gradient_step() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::vector(vec![0.5, 1.0])];
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut p, &g);
        assert_eq!(p[0].data(), &[0.95, -2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::vector(vec![0.5, -3.0])];
        Optimizer::new(OptimizerKind::Adam, 0.01).step(&mut p, &g);
        assert!((p[0].data()[0] - 0.99).abs() < 1e-6);
        assert!((p[0].data()[1] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
        for _ in 0..2000 {
            let g = vec![Tensor::vector(vec![2.0 * p[0].data()[0]])];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }
}
