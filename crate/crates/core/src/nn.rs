//! Transformer building blocks on top of the autodiff graph.

use crate::error::Result;
use crate::lm::lora::LoraAdapter;
use crate::rng::RngHandle;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

pub const LN_EPS: f64 = 1e-6;

/// Forward-pass mode. Training mode carries the RNG used by dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngHandle),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut RngHandle) -> Self {
        let w = store.xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let b = bias.then(|| store.zeros(format!("{name}.bias"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[dim]),
            beta: store.zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut RngHandle) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn param_count(d_in: usize, hidden: usize, d_out: usize) -> usize {
        Linear::param_count(d_in, hidden, true) + Linear::param_count(hidden, d_out, true)
    }
}

/// Multi-head attention. Queries come from one sequence, keys and values
/// from another (the same one for self-attention).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut RngHandle) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            lora_q: None,
            lora_v: None,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim, true)
    }

    fn project<T: Real>(g: &mut Graph<'_, T>, base: &Linear, lora: Option<&LoraAdapter>, x: Var, mode: &mut Mode) -> Result<Var> {
        let y = base.forward(g, x)?;
        match lora {
            Some(l) => {
                let delta = l.delta(g, x, mode)?;
                g.add(y, delta)
            }
            None => Ok(y),
        }
    }

    /// `[B, S, C]` → `[B·h, S, C/h]`.
    fn split_heads<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let dh = c / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, n, dh])
    }

    /// `xq: [B, Sq, C]`, `xkv: [B, Sk, C]`, optional additive `mask: [Sq, Sk]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var, mask: Option<Var>, mode: &mut Mode) -> Result<Var> {
        let sq = g.shape(xq).to_vec();
        let (b, n, c) = (sq[0], sq[1], sq[2]);
        let dh = c / self.heads;
        let q = Self::project(g, &self.q, self.lora_q.as_ref(), xq, mode)?;
        let k = self.k.forward(g, xkv)?;
        let v = Self::project(g, &self.v, self.lora_v.as_ref(), xkv, mode)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let scores = match mask {
            Some(m) => g.add_broadcast(scores, m)?,
            None => scores,
        };
        let p = g.softmax(scores)?;
        let o = g.bmm(p, v, false)?;
        let o = g.reshape(o, &[b, self.heads, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, c])?;
        self.o.forward(g, o)
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut RngHandle) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng),
        }
    }

    pub fn param_count(dim: usize, mlp_ratio: usize) -> usize {
        2 * LayerNorm::param_count(dim) + Attention::param_count(dim) + Mlp::param_count(dim, dim * mlp_ratio, dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<Var>, mode: &mut Mode) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask, mode)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Pre-norm cross-attention block: queries attend to a context sequence.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut RngHandle) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng),
        }
    }

    pub fn param_count(dim: usize, mlp_ratio: usize) -> usize {
        3 * LayerNorm::param_count(dim) + Attention::param_count(dim) + Mlp::param_count(dim, dim * mlp_ratio, dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, ctx: Var, mode: &mut Mode) -> Result<Var> {
        let hq = self.ln_q.forward(g, q)?;
        let hk = self.ln_kv.forward(g, ctx)?;
        let a = self.attn.forward(g, hq, hk, None, mode)?;
        let q = g.add(q, a)?;
        let h = self.ln2.forward(g, q)?;
        let m = self.mlp.forward(g, h)?;
        g.add(q, m)
    }
}

/// Additive causal mask `[s, s]`: 0 on and below the diagonal.
pub fn causal_mask<T: Real>(s: usize) -> crate::tensor::Tensor<T> {
    crate::tensor::Tensor::from_fn(vec![s, s], |i| {
        let (r, c) = (i / s, i % s);
        if c <= r {
            T::zero()
        } else {
            T::lit(crate::tensor::MASK_NEG)
        }
    })
}
