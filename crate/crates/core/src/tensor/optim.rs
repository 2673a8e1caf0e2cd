use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplies the learning rate at every epoch boundary.
    pub decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 0.95 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    lr: f64,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { lr: cfg.lr, cfg, step: 0, moments: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.cfg.decay;
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Frozen parameters never receive gradients, so they are never touched.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdamState<T>) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.cfg.beta1, state.cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let step_size = T::lit(state.lr / bc1);
    let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
    let eps = T::lit(state.cfg.eps);
    for (id, g) in grads.params() {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        if state.moments.len() <= id.index() {
            state.moments.resize_with(id.index() + 1, || None);
        }
        let n = g.numel();
        let (m, v) = state.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            *w = *w - step_size * *mi / ((*vi).sqrt() * inv_bc2_sqrt + eps);
        }
    }
}
