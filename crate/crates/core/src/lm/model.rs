use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraConfig};
use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, LayerNorm, Linear, Mode};
use crate::rng::RngHandle;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LM_PREFIX: &str = "lm.";
pub const LORA_PREFIX: &str = "lora.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub ff_expansion: usize,
}

impl LmConfig {
    pub fn toy() -> Self {
        Self { d_model: 64, layers: 2, heads: 4, max_seq_len: 768, ff_expansion: 4 }
    }

    pub fn validate(&self, prefix_len: usize) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm.d_model {} is not divisible by lm.heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ff_expansion == 0 {
            return Err(Error::Config("lm.layers and lm.ff_expansion must be >= 1".into()));
        }
        if self.max_seq_len < prefix_len + 2 {
            return Err(Error::Config(format!(
                "lm.max_seq_len {} cannot hold an image prefix of {prefix_len} tokens plus <bos>/<eos>",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// One supervised sequence: `<bos> prompt answer <eos>` with loss on the
/// answer and `<eos>` only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmExample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl LmExample {
    pub fn ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.prompt.len() + self.answer.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(&self.prompt);
        ids.extend_from_slice(&self.answer);
        ids.push(EOS);
        ids
    }
}

/// Decoder-only transformer with learned positions, pre-norm blocks and an
/// untied output head.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl LanguageModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &LmConfig, vocab_size: usize, rng: &mut RngHandle) -> Result<Self> {
        cfg.validate(0)?;
        let d = cfg.d_model;
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            tok_embed: store.normal("lm.tok_embed", &[vocab_size, d], 0.02, rng),
            pos_embed: store.normal("lm.pos_embed", &[cfg.max_seq_len, d], 0.02, rng),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(store, &format!("lm.blocks.{i}"), d, cfg.heads, cfg.ff_expansion, rng))
                .collect(),
            norm: LayerNorm::new(store, "lm.norm", d),
            head: Linear::new(store, "lm.head", d, vocab_size, true, rng),
        })
    }

    /// Adds LoRA adapters (`lora.blocks.{i}.q|v`) to every query and value
    /// projection. The base model must already be frozen by the caller.
    pub fn attach_lora<T: Real>(&mut self, store: &mut ParamStore<T>, cfg: &LoraConfig, rng: &mut RngHandle) -> Result<()> {
        cfg.validate()?;
        let d = self.cfg.d_model;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.attn.lora_q = Some(LoraAdapter::new(store, &format!("lora.blocks.{i}.q"), d, d, cfg, rng));
            b.attn.lora_v = Some(LoraAdapter::new(store, &format!("lora.blocks.{i}.v"), d, d, cfg, rng));
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.lora_q.is_some())
    }

    /// Logits `[B, M + T, V]` for an optional image prefix `[B, M, d]`
    /// followed by right-padded token rows `ids` (`B` rows of length `T`).
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, prefix: Option<Var>, ids: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        let b = ids.len();
        let t = ids.first().map_or(0, Vec::len);
        if b == 0 || t == 0 || ids.iter().any(|r| r.len() != t) {
            return Err(Error::shape("lm_forward", "token rows must be non-empty and equally long"));
        }
        let d = self.cfg.d_model;
        let m = match prefix {
            Some(p) => {
                let s = g.shape(p);
                if s.len() != 3 || s[0] != b || s[2] != d {
                    return Err(Error::shape("lm_forward", format!("image prefix {s:?}, expected [{b}, M, {d}]")));
                }
                s[1]
            }
            None => 0,
        };
        let s = m + t;
        if s > self.cfg.max_seq_len {
            return Err(Error::shape(
                "lm_forward",
                format!("sequence of {s} tokens ({m} image + {t} text) exceeds max_seq_len {}", self.cfg.max_seq_len),
            ));
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let table = g.param(self.tok_embed);
        let x = g.embedding(table, &flat)?;
        let x = g.reshape(x, &[b, t, d])?;
        let x = match prefix {
            Some(p) => g.concat(&[p, x], 1)?,
            None => x,
        };
        let pos_table = g.param(self.pos_embed);
        let pos = g.embedding(pos_table, &(0..s).collect::<Vec<_>>())?;
        let mut x = g.add_broadcast(x, pos)?;
        let mask = g.constant(causal_mask(s));
        for blk in &self.blocks {
            x = blk.forward(g, x, Some(mask), mode)?;
        }
        let x = self.norm.forward(g, x)?;
        self.head.forward(g, x)
    }

    /// Logits and mean answer cross-entropy for a batch of examples.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, prefix: Option<Var>, batch: &[LmExample], mode: &mut Mode) -> Result<(Var, Var)> {
        if let Some(i) = batch.iter().position(|e| e.answer.is_empty()) {
            return Err(Error::Data(format!("example {i} has an empty answer: nothing to supervise")));
        }
        let rows: Vec<Vec<usize>> = batch.iter().map(LmExample::ids).collect();
        let t = rows.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| r.iter().copied().chain(std::iter::repeat(PAD)).take(t).collect())
            .collect();
        let logits = self.logits(g, prefix, &padded, mode)?;
        let s = g.shape(logits)[1];
        let m = s - t;
        let mut targets = vec![None; batch.len() * s];
        for (bi, (ex, row)) in batch.iter().zip(&rows).enumerate() {
            // Text position j predicts row[j + 1]; supervise answer and <eos>.
            for j in ex.prompt.len()..row.len() - 1 {
                targets[bi * s + m + j] = Some(row[j + 1]);
            }
        }
        let loss = g.cross_entropy(logits, &targets)?;
        Ok((logits, loss))
    }

    /// Greedy decoding after `<bos> prompt`; ties go to the lowest id.
    /// Stops at `<eos>` or after `max_new_tokens`; returns generated ids
    /// without the `<eos>`.
    pub fn generate<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix: Option<&Tensor<T>>,
        prompt: &[usize],
        max_new_tokens: usize,
    ) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = std::iter::once(BOS).chain(prompt.iter().copied()).collect();
        let m = prefix.map_or(0, |p| p.shape()[1]);
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            if m + ids.len() > self.cfg.max_seq_len {
                break;
            }
            let mut g = Graph::with_params(store);
            let p = prefix.map(|p| g.constant(p.clone()));
            let logits = self.logits(&mut g, p, &[ids.clone()], &mut Mode::Eval)?;
            let v = self.vocab_size;
            let last = &g.value(logits).data()[(m + ids.len() - 1) * v..(m + ids.len()) * v];
            let next = argmax_first(last);
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax_first<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
