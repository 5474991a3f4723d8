//! Adam over the learnable leaves of a parameter tree.

use crate::model::{Gradients, ModelParams};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Scalar> Adam<T> {
    /// Fresh (zero) moments shaped like the learnable leaves of `params`.
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .leaves
                .iter()
                .map(|l| {
                    if l.is_learnable() {
                        vec![T::zero(); l.values.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One bias-corrected update; norm statistics are left untouched.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let (lr, eps) = (T::c(lr), T::c(EPSILON));
        for (i, leaf) in params.leaves.iter_mut().enumerate() {
            if !leaf.is_learnable() {
                continue;
            }
            let g = &grads.per_leaf[i];
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for k in 0..leaf.values.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                leaf.values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
