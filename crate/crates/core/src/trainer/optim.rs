//! Bias-corrected Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub step: u64,
    /// First and second moments keyed by parameter name.
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Plain Adam: no weight decay.
    pub fn adam(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8, 0.0)
    }

    /// Updates every parameter with `requires_grad`, reading its stored grad
    /// (absent grads count as zero). Fails before touching anything if a
    /// gradient is not finite.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in store.iter().filter(|(_, p)| p.requires_grad) {
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(format!(
                        "gradient of {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, p) in store.iter_mut().filter(|(_, p)| p.requires_grad) {
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                let z = Tensor::zeros(p.value.shape());
                (z.clone(), z)
            });
            let grad = p.grad.as_ref().map(Tensor::data);
            let (m, v, w) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for i in 0..w.len() {
                let g = grad.map_or(0.0, |g| g[i].as_f64());
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                let step = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                w[i] = T::from_f64(w[i].as_f64() * decay - self.lr * step);
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
            }
        }
        Ok(())
    }
}
