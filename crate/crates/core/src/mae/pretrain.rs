use serde::{Deserialize, Serialize};

use super::{patchify, Mae};
use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Real, Tensor};
use crate::volume::NormalizedGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 4, lr: 1.5e-4, lr_decay: 0.95 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretrain.steps and pretrain.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("pretrain.lr must be > 0 and pretrain.lr_decay in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One training-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Masked-reconstruction training over `data`. Each epoch visits the
/// grids in a fresh shuffled order; a trailing partial batch is dropped
/// unless the dataset is smaller than one batch. `on_step` sees every log
/// record as it is produced.
pub fn pretrain_loop<T: Real>(
    mae: &Mae,
    store: &mut ParamStore<T>,
    data: &[NormalizedGrid<T>],
    cfg: &PretrainConfig,
    rng: &mut RngHandle,
    mut on_step: impl FnMut(&PretrainLog),
) -> Result<Vec<PretrainLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    let batch = cfg.batch_size.min(data.len());
    let patch = mae.cfg().patch_size;
    let mut order_rng = rng.fork(1);
    let mut mask_rng = rng.fork(2);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, decay: cfg.lr_decay, ..AdamConfig::default() });
    let mut log = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            if !order.is_empty() {
                adam.end_epoch();
            }
            order = order_rng.permutation(data.len());
            cursor = 0;
        }
        let grids: Vec<NormalizedGrid<T>> = order[cursor..cursor + batch].iter().map(|&i| data[i].clone()).collect();
        cursor += batch;
        let patches: Tensor<T> = patchify(&grids, patch)?.values;
        let lr = adam.lr();
        let (loss, grads) = {
            let mut g = Graph::with_params(store);
            let out = mae.forward(&mut g, &patches, &mut mask_rng)?;
            (g.value(out.loss).item().to_f64().unwrap_or(f64::NAN), g.backward(out.loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::Data(format!("non-finite pretraining loss at step {step}")));
        }
        adam_step(store, &grads, &mut adam);
        let rec = PretrainLog { step, loss, lr };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}
