//! SGD with classical momentum.
//!
//! Velocity update `v <- mu*v + g`, parameter update `p <- p - lr*v`.  One
//! optimizer instance owns one velocity buffer per parameter tensor; callers
//! must present parameters in the same order every step.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("step with {got} parameters, optimizer tracks {expected}")]
    ParamCountChanged { expected: usize, got: usize },
    #[error("param {index} changed shape: {was:?} -> {now:?}")]
    ParamShapeChanged {
        index: usize,
        was: Vec<usize>,
        now: Vec<usize>,
    },
    #[error("param {index}: gradient shape {grad:?} does not match param {param:?}")]
    GradShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Apply one update.  Velocity buffers are allocated on first use and
    /// stay aligned with the parameter order thereafter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), OptimError> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if params.len() != self.velocity.len() || params.len() != grads.len() {
            return Err(OptimError::ParamCountChanged {
                expected: self.velocity.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != self.velocity[i].shape() {
                return Err(OptimError::ParamShapeChanged {
                    index: i,
                    was: self.velocity[i].shape().to_vec(),
                    now: p.shape().to_vec(),
                });
            }
            if p.shape() != g.shape() {
                return Err(OptimError::GradShapeMismatch {
                    index: i,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            let v = self.velocity[i].data_mut();
            let pd = p.data_mut();
            for ((vj, pj), gj) in v.iter_mut().zip(pd.iter_mut()).zip(g.data()) {
                *vj = self.momentum * *vj + gj;
                *pj -= self.lr * *vj;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_with_unit_gradient() {
        // mu=0.9, lr=0.1, g=1 from p=0: v1=1, p1=-0.1; v2=1.9, p2=-0.29.
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-15);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        let mut opt = SgdMomentum::new(0.2, 0.0);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[0.9, -1.1]);
    }

    #[test]
    fn rejects_shape_drift() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        let mut q = Tensor::zeros(&[2]);
        let g2 = Tensor::zeros(&[2]);
        assert!(matches!(
            opt.step(&mut [&mut q], &[&g2]),
            Err(OptimError::ParamShapeChanged { .. })
        ));
        let gbad = Tensor::zeros(&[3]);
        assert!(matches!(
            opt.step(&mut [&mut p], &[&gbad]),
            Err(OptimError::GradShapeMismatch { .. })
        ));
    }
}
