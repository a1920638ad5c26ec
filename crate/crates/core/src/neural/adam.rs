use ndarray::ArrayD;

use super::network::{ParamGrads, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<ArrayD<f64>>>,
    pub v: Vec<Vec<ArrayD<f64>>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = params.zeros_like_grads().layers;
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update of every trainable tensor.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (l, layer) in params.layers.iter_mut().enumerate() {
            if grads.layers[l].len() != layer.weights.len() {
                return Err(Error::Shape(format!("layer {l}: gradient count mismatch")));
            }
            for (j, w) in layer.weights.iter_mut().enumerate() {
                let g = &grads.layers[l][j];
                if g.shape() != w.shape() {
                    return Err(Error::Shape(format!("layer {l}: gradient shape mismatch")));
                }
                let m = &mut self.m[l][j];
                let v = &mut self.v[l][j];
                ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
        }
        Ok(())
    }
}
