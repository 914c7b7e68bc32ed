//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{hyper_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Optimizer state: per-parameter moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, moments: BTreeMap::new() }
    }

    /// One Adam step over `params`. Parameters without an entry in `grads`
    /// are updated with a zero gradient.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        if !(lr > 0.0) {
            return Err(hyper_err("adam_step", format!("learning rate must be positive, got {lr}")));
        }
        let params: Vec<_> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(shape_err(
                        "adam_step",
                        format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
                    ));
                }
            }
            if let Some(mo) = self.moments.get(*name) {
                if mo.m.shape() != p.shape() {
                    return Err(shape_err(
                        "adam_step",
                        format!("{name}: param {:?}, state {:?}", p.shape(), mo.m.shape()),
                    ));
                }
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ib1, ib2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (lr_t, eps_t) = (T::of(lr), T::of(eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));

        for (name, p) in params {
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let g = grads.get(name);
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + ib1 * gi;
                v[i] = b2 * v[i] + ib2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pv -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}
