//! Adam with decoupled weight decay.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// Moment buffers shaped like the parameters, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hp: AdamW,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(hp: AdamW, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            hp,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update at learning rate `lr`. `grads` is indexed like the store's
    /// parameters; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.params().len() || self.m.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters and {} moment buffers",
                grads.len(),
                store.params().len(),
                self.m.len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if let Some(g) = g {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of {} at flat index {i}", p.name),
                    });
                }
            }
        }
        self.step += 1;
        let AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hp;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in store.params_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = *w * decay - lr * update;
            }
        }
        Ok(())
    }
}
