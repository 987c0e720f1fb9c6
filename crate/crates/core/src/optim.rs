//! First-order parameter updates: plain gradient descent and Adam, both with
//! L2 weight decay folded into the gradient.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self { kind, learning_rate, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate, weight_decay)
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, weight_decay)
    }

    /// Applies one update to every parameter using its accumulated gradient.
    /// Gradients are left in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(i));
        }
        let grads: Vec<Vec<T>> = params.iter().map(|p| p.grad().unwrap().to_vec()).collect();
        let values: Vec<&mut [T]> = params.iter_mut().map(|p| p.data_mut()).collect();
        self.step_slices(values, &grads);
        Ok(())
    }

    /// Same update on raw slices, for callers that keep gradients elsewhere.
    pub fn step_slices(&mut self, values: Vec<&mut [T]>, grads: &[Vec<T>]) {
        self.step += 1;
        let lr = T::lit(self.learning_rate);
        let wd = T::lit(self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                for (v, g) in values.into_iter().zip(grads) {
                    for (p, &gi) in v.iter_mut().zip(g) {
                        *p -= lr * (gi + wd * *p);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.len() != grads.len() {
                    self.first = grads.iter().map(|g| alloc::vec![T::zero(); g.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let one = T::one();
                for (((v, g), m), s) in values.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((p, &gi), mi), si) in v.iter_mut().zip(g).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let geff = gi + wd * *p;
                        *mi = b1 * *mi + (one - b1) * geff;
                        *si = b2 * *si + (one - b2) * geff * geff;
                        let mhat = *mi / c1;
                        let shat = *si / c2;
                        *p -= lr * mhat / (shat.sqrt() + e);
                    }
                }
            }
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore_moments(&mut self, first: Vec<Vec<T>>, second: Vec<Vec<T>>) {
        self.first = first;
        self.second = second;
    }
}
