//! Adam optimizer.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first/second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Adam {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`. Every
    /// parameter must carry a gradient (call `zero_grads` before
    /// accumulating).
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, (name, t)) in store.iter().enumerate() {
            if t.grad.is_none() {
                return Err(Error::contract(format!("parameter {name} has no gradient")));
            }
            if self.m[i].len() != t.len() {
                return Err(Error::dim(format!(
                    "moment shape mismatch for {name}: {} vs {}",
                    self.m[i].len(),
                    t.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let bc1 = T::lit(1.0 - BETA1.powi(t));
        let bc2 = T::lit(1.0 - BETA2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(EPSILON));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
