//! Gradient-norm clipping, SGD with Nesterov momentum, Adam, and the
//! cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimKind {
    SgdNesterov,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over `total_steps`.
    Cosine {
        total_steps: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub schedule: Schedule,
}

impl OptimConfig {
    /// Test-time adaptation recipe: Nesterov SGD, momentum 0.9, weight decay
    /// 1e-4, gradient norm clipped at 0.5.
    pub fn sgd_nesterov(learning_rate: f64) -> Self {
        Self {
            kind: OptimKind::SgdNesterov,
            learning_rate,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(0.5),
            schedule: Schedule::Constant,
        }
    }

    /// Pretraining recipe: Adam at 1e-3 with cosine decay.
    pub fn adam_cosine(learning_rate: f64, total_steps: u64) -> Self {
        Self {
            kind: OptimKind::Adam,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: None,
            schedule: Schedule::Cosine { total_steps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip norm must be positive".into()));
            }
        }
        if let Schedule::Cosine { total_steps: 0 } = self.schedule {
            return Err(Error::Config("cosine schedule needs total steps > 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.learning_rate),
            Schedule::Cosine { total_steps } => cosine_lr(step.min(total_steps), total_steps, self.learning_rate),
        }
    }
}

/// `base_lr · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: u64, total: u64, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs total > 0".into()));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} beyond schedule length {total}")));
    }
    let frac = step as f64 / total as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Scales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One update of every trainable parameter, then zeroes all gradients.
///
/// Order: NaN check, global norm clipping, `g += wd·p`, optimizer rule.
/// `step` indexes the learning-rate schedule.
pub fn optimizer_step(store: &mut ParamStore, cfg: &OptimConfig, step: u64) -> Result<()> {
    for (name, p) in store.iter() {
        if p.trainable && !p.grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
    }
    if let Some(max_norm) = cfg.clip_norm {
        clip_grad_norm(store, max_norm);
    }
    let lr = cfg.lr_at(step)?;
    if cfg.kind == OptimKind::Adam {
        store.adam_step += 1;
    }
    let t = store.adam_step as i32;
    for (_, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let mut g = p.grad.clone();
        if cfg.weight_decay != 0.0 {
            for (gv, pv) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gv += cfg.weight_decay * pv;
            }
        }
        match cfg.kind {
            OptimKind::SgdNesterov => {
                let buf = p.slot_a.get_or_insert_with(|| Tensor::zeros(g.shape()));
                for ((w, gv), b) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(buf.data_mut().iter_mut())
                {
                    *b = cfg.momentum * *b + gv;
                    *w -= lr * (gv + cfg.momentum * *b);
                }
            }
            OptimKind::Adam => {
                let m = p.slot_a.get_or_insert_with(|| Tensor::zeros(g.shape()));
                let v = p.slot_b.get_or_insert_with(|| Tensor::zeros(g.shape()));
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((w, gv), mv), vv) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                {
                    *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                    *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                    *w -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    store.zero_grad();
    Ok(())
}
