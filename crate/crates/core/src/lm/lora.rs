//! Low-rank adapters: `y = W x + (alpha / r) · B A dropout(x)` with `W`
//! frozen, `A` gaussian-initialized and `B` zero-initialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mode};
use crate::rng::RngHandle;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LORA_A_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, alpha: 32.0, dropout: 0.1 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `[d_in, r]`
    pub a: ParamId,
    /// `[r, d_out]`
    pub b: ParamId,
    pub scaling: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut RngHandle) -> Self {
        let a = store.normal(format!("{name}.a"), &[d_in, cfg.rank], LORA_A_INIT_STD, rng);
        let b = store.zeros(format!("{name}.b"), &[cfg.rank, d_out]);
        Self { a, b, scaling: cfg.scaling(), dropout: cfg.dropout }
    }

    pub fn param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
        rank * (d_in + d_out)
    }

    /// The low-rank update `(alpha / r) · dropout(x) A B`.
    pub fn delta<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mode: &mut Mode) -> Result<Var> {
        let x = match mode {
            Mode::Train(rng) => g.dropout(x, self.dropout, rng)?,
            Mode::Eval => x,
        };
        let (a, b) = (g.param(self.a), g.param(self.b));
        let h = g.matmul(x, a)?;
        let h = g.matmul(h, b)?;
        Ok(g.scale(h, T::lit(self.scaling)))
    }

    /// `W + (alpha / r) · A B` for the adapted base map.
    pub fn merged_weight<T: Real>(&self, store: &ParamStore<T>, base: &Linear) -> Tensor<T> {
        let (a, b) = (store.value(self.a), store.value(self.b));
        let (d_in, r, d_out) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut ab = vec![T::zero(); d_in * d_out];
        T::gemm(d_in, r, d_out, a.data(), (r, 1), b.data(), (d_out, 1), T::zero(), &mut ab, (d_out, 1));
        let mut w = store.value(base.w).clone();
        let s = T::lit(self.scaling);
        for (wi, di) in w.data_mut().iter_mut().zip(ab) {
            *wi = *wi + s * di;
        }
        w
    }
}

/// A frozen linear map with a trainable low-rank adapter.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: LoraAdapter,
}

/// Attaches an adapter named `name` to `base` and freezes the base weights.
pub fn lora_apply<T: Real>(store: &mut ParamStore<T>, base: &Linear, name: &str, cfg: &LoraConfig, rng: &mut RngHandle) -> Result<LoraLinear> {
    cfg.validate()?;
    store.get_mut(base.w).trainable = false;
    if let Some(b) = base.b {
        store.get_mut(b).trainable = false;
    }
    let adapter = LoraAdapter::new(store, name, base.d_in, base.d_out, cfg, rng);
    Ok(LoraLinear { base: base.clone(), adapter })
}

impl LoraLinear {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mode: &mut Mode) -> Result<Var> {
        let y = self.base.forward(g, x)?;
        let d = self.adapter.delta(g, x, mode)?;
        g.add(y, d)
    }
}
