use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use super::unet::UNetParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one entry per learnable tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &UNetParams<T>, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.learnable().iter().map(|t| t.len()).collect();
        AdamState {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update of every learnable tensor.
    pub fn update<T: Scalar>(
        &mut self,
        params: &mut UNetParams<T>,
        grads: &UNetParams<T>,
        lr: f64,
    ) -> Result<()> {
        let g = grads.learnable();
        let mut p = params.learnable_mut();
        if g.len() != p.len() || g.len() != self.m.len() {
            return Err(Error::ShapeMismatch(
                "gradient layout differs from parameters".into(),
            ));
        }
        if g.iter().any(|t| t.iter().any(|v| !v.f64().is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
            if pt.len() != gt.len() || pt.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(
                    "gradient layout differs from parameters".into(),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..pt.len() {
                let gj = gt[j].f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                pt[j] = T::of(pt[j].f64() - step);
            }
        }
        Ok(())
    }
}
