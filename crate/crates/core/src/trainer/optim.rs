//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{NppError, Result};
use crate::tensor::{Array, Float};
use crate::transformer::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1)
            || !unit.contains(&self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(NppError::Config(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    /// Weight decay applies to matrices only; norm gains and biases are exempt.
    decay: Vec<bool>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &Parameters<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|p| Array::zeros(p.shape()))
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            decay: params.tensors().iter().map(|p| p.ndim() >= 2).collect(),
        }
    }

    /// Rebuilds state from saved moments.
    pub fn from_parts(
        config: AdamWConfig,
        params: &Parameters<T>,
        step: u64,
        m: Vec<Array<T>>,
        v: Vec<Array<T>>,
    ) -> Result<Self> {
        let n = params.len();
        if m.len() != n || v.len() != n {
            return Err(NppError::Checkpoint(format!(
                "{} first and {} second moments for {n} parameters",
                m.len(),
                v.len()
            )));
        }
        for ((p, a), b) in params.tensors().iter().zip(&m).zip(&v) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(NppError::Checkpoint("moment shape does not match parameter".into()));
            }
        }
        let mut opt = AdamW::new(config, params);
        opt.step = step;
        opt.m = m;
        opt.v = v;
        Ok(opt)
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Array<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array<T>] {
        &self.v
    }

    pub fn reset_moments(&mut self) {
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            a.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        self.step = 0;
    }

    pub fn update(&mut self, params: &mut Parameters<T>, grads: &[Array<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(NppError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_m_b1, one_m_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let shrink = T::lit(1.0 - lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let w = params.tensor_mut(i);
            if g.shape() != w.shape() {
                return Err(NppError::Dimension(format!(
                    "gradient {i} shape {:?} vs {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            let decay = self.decay[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                if decay {
                    *w *= shrink;
                }
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients, accumulated in f64.
pub fn global_norm<T: Float>(grads: &[Array<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Float>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let scale = T::lit(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}
