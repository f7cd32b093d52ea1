//! Adam with per-tensor learning-rate multipliers and optional global
//! gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Joint L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Tensor]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// One update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Param(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, (entry, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let lr = self.cfg.lr * entry.lr_mult as f64;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in entry.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64 * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= (lr * mh / (vh.sqrt() + self.cfg.eps)) as Real;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Real) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::full(&[1], v));
        ps
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let mut ps = single(1.0);
        let mut opt = Adam::new(&ps, AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut ps, &[Tensor::full(&[1], 3.0)]).unwrap();
        assert!((ps.get(0).item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn lr_multiplier_scales_step() {
        let mut ps = ParamSet::new();
        ps.add_with_lr("x", Tensor::full(&[1], 0.0), 0.02);
        let mut opt = Adam::new(&ps, AdamConfig { lr: 1.0, ..Default::default() });
        opt.step(&mut ps, &[Tensor::full(&[1], 1.0)]).unwrap();
        assert!((ps.get(0).item() + 0.02).abs() < 1e-6);
    }

    #[test]
    fn clipping_rescales_gradient() {
        let mut ps = single(0.0);
        let cfg = AdamConfig {
            lr: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            clip_norm: Some(2.0),
        };
        let mut opt = Adam::new(&ps, cfg);
        let norm = opt.step(&mut ps, &[Tensor::full(&[1], 10.0)]).unwrap();
        assert_eq!(norm, 10.0);
        // beta2 = 0 means v = g^2 of the clipped gradient, so the step is still sign(g).
        assert!((ps.get(0).item() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ps = single(5.0);
        let mut opt = Adam::new(&ps, AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let x = ps.get(0).item();
            opt.step(&mut ps, &[Tensor::full(&[1], 2.0 * (x - 1.5))]).unwrap();
        }
        assert!((ps.get(0).item() - 1.5).abs() < 1e-2);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut ps = single(0.0);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        assert!(opt.step(&mut ps, &[Tensor::full(&[1], Real::NAN)]).is_err());
        assert_eq!(ps.get(0).item(), 0.0);
    }
}
