//! Adam with per-group learning rates and global gradient-norm clipping.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| m.len() == p.value.numel() && v.len() == p.value.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("optimizer state does not match the parameters".into()))
        }
    }

    /// One update from the gradients held in `store`; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &OptimConfig) -> f64 {
        let norm = grad_norm(store);
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for (i, p) in store.iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Head => cfg.lr,
                ParamGroup::Backbone => cfg.backbone_lr,
                ParamGroup::MotionBackbone if cfg.freeze_motion => continue,
                ParamGroup::MotionBackbone => cfg.backbone_lr,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[k] * clip;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
        norm
    }
}

pub fn grad_norm(store: &ParamStore) -> f64 {
    libm::sqrt(
        store
            .iter()
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum(),
    )
}
