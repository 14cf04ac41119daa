//! Adam with bias-corrected moments.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` against `grads` (same order and shapes every call).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dim(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != g.len() {
                return Err(Error::Dim(format!("parameter {i} changed shape")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.3, -5.0]);
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p], &[g]).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::vector(vec![3.0]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = Tensor::vector(vec![2.0 * (p.data()[0] - 1.0)]);
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let mut p = Tensor::vector(vec![1.0]);
        assert!(Adam::new(0.1).step(vec![&mut p], &[]).is_err());
    }
}
