//! Momentum SGD with L2 weight decay folded into the velocity.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("gradient for `{path}` has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch { path: String, grad: Vec<usize>, param: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// One update over `(path, param, grad)` triples:
    /// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
    ///
    /// All gradients are validated before any parameter moves.
    pub fn step(&mut self, updates: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<(), OptimError> {
        for (path, param, grad) in updates.iter() {
            if grad.shape() != param.shape() {
                return Err(OptimError::ShapeMismatch {
                    path: path.to_string(),
                    grad: grad.shape().to_vec(),
                    param: param.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(OptimError::NonFiniteGrad(path.to_string()));
            }
        }
        for (path, param, grad) in updates.iter_mut() {
            let v = self
                .velocity
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; param.numel()]);
            for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + *g + self.weight_decay * *p;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(opt: &mut Sgd, p: &mut Tensor, g: &Tensor) -> Result<(), OptimError> {
        opt.step(&mut [("w", p, g)])
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
        run(&mut Sgd::new(0.1, 0.0, 0.0), &mut p, &g).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn two_momentum_steps_on_constant_gradient() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::new(&[1], vec![2.0]).unwrap();
        let mut opt = Sgd::new(0.5, 0.9, 0.0);
        run(&mut opt, &mut p, &g).unwrap();
        run(&mut opt, &mut p, &g).unwrap();
        // −lr·(g + 1.9g) = −0.5·5.8
        assert!((p.data()[0] - (-2.9)).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let orig = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut p = orig.clone();
        let g = Tensor::new(&[3], vec![5.0, -5.0, 1e9]).unwrap();
        run(&mut Sgd::new(0.0, 0.9, 5e-4), &mut p, &g).unwrap();
        assert!(p.bit_eq(&orig));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut a = Tensor::zeros(&[1]);
        let mut b = Tensor::zeros(&[1]);
        let ga = Tensor::ones(&[1]);
        let gb = Tensor::new(&[1], vec![f32::NAN]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        let err = opt.step(&mut [("stem.conv", &mut a, &ga), ("head.fc.weight", &mut b, &gb)]).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGrad("head.fc.weight".into()));
        assert_eq!(a.data(), &[0.0], "nothing moves when any gradient is bad");
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        run(&mut Sgd::new(0.1, 0.0, 0.5), &mut p, &Tensor::zeros(&[1])).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-6);
    }
}
