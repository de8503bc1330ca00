//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. `grads` is indexed like the store; `None` means zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        let lr_t = lit::<T>(lr);
        let decay = T::one() - lr_t * lit::<T>(c.weight_decay);
        let eps = lit::<T>(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.0;
            let param = store.get_mut(id);
            let g = grads.get(i).and_then(Option::as_ref);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..param.len() {
                let gj = g.map_or(T::zero(), |t| t.data()[j]);
                let mj = b1 * m.data()[j] + (T::one() - b1) * gj;
                let vj = b2 * v.data()[j] + (T::one() - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = lr_t * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                let p = &mut param.data_mut()[j];
                *p = *p * decay - update;
            }
        }
    }
}
