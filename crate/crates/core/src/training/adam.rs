use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates mirror the parameter store they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, p) in params.iter() {
                s.insert(name, Tensor::zeros(p.shape().to_vec())).expect("names are unique");
            }
            s
        };
        Self { config, t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update of every parameter. Entries whose gradient
    /// is exactly zero are left alone together with their moments, so a
    /// zero gradient never moves a parameter whatever the state.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::ParamMismatch {
                    name: name.to_string(),
                    msg: format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            if self.m.get(name)?.shape() != p.shape() {
                return Err(Error::ParamMismatch { name: name.to_string(), msg: "optimizer state shape".into() });
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let pd = p.data_mut();
            for (i, &gi) in g.iter().enumerate() {
                if gi == T::zero() {
                    continue;
                }
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
