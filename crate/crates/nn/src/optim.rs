//! Adam with bias correction.

use thiserror::Error;

use crate::autodiff::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}; step refused")]
    NonFiniteGradient(usize),
    #[error("expected {expected} gradients, got {got}")]
    Arity { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params.into_iter().map(|p| vec![T::zero(); p.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: zeros.clone(), m: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[&[T]],
        lr: f64,
    ) -> Result<(), OptimError> {
        if grads.len() != self.m.len() {
            return Err(OptimError::Arity { expected: self.m.len(), got: grads.len() });
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(OptimError::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powi(t));
        let c2 = T::c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::c(lr), T::c(self.eps));
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
