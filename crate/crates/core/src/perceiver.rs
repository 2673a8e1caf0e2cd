//! Token mergers mapping `(B, N, C)` encoder features to `(B, N/k³, C')`
//! LM-prefix tokens: the 3D convolution perceiver and its ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::PatchGrid;
use crate::nn::{CrossBlock, LayerNorm, Linear, Mlp, Mode};
use crate::rng::RngHandle;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

pub const PREFIX: &str = "perceiver.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceiverKind {
    Conv3d,
    GlobalQformer,
    LocalQformer,
    MlpMixer,
    AvgPool,
    MaxPool,
}

impl PerceiverKind {
    pub const ALL: [PerceiverKind; 6] = [
        PerceiverKind::Conv3d,
        PerceiverKind::GlobalQformer,
        PerceiverKind::LocalQformer,
        PerceiverKind::MlpMixer,
        PerceiverKind::AvgPool,
        PerceiverKind::MaxPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerceiverKind::Conv3d => "conv3d",
            PerceiverKind::GlobalQformer => "global_qformer",
            PerceiverKind::LocalQformer => "local_qformer",
            PerceiverKind::MlpMixer => "mlp_mixer",
            PerceiverKind::AvgPool => "avg_pool",
            PerceiverKind::MaxPool => "max_pool",
        }
    }
}

impl fmt::Display for PerceiverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerceiverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perceiver kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceiverSpec {
    pub kind: PerceiverKind,
    pub k: usize,
    pub out_channels: usize,
    #[serde(default = "default_qformer_layers")]
    pub qformer_layers: usize,
    #[serde(default = "default_qformer_heads")]
    pub qformer_heads: usize,
    #[serde(default = "default_mixer_expansion")]
    pub mixer_expansion: usize,
}

fn default_qformer_layers() -> usize {
    2
}

fn default_qformer_heads() -> usize {
    4
}

fn default_mixer_expansion() -> usize {
    4
}

impl PerceiverSpec {
    pub fn new(kind: PerceiverKind, k: usize, out_channels: usize) -> Self {
        Self {
            kind,
            k,
            out_channels,
            qformer_layers: default_qformer_layers(),
            qformer_heads: default_qformer_heads(),
            mixer_expansion: default_mixer_expansion(),
        }
    }

    /// Output grid for an input grid; errors if `k` does not divide it.
    pub fn output_grid(&self, grid: &PatchGrid) -> Result<PatchGrid> {
        if self.k == 0 || grid.dims.iter().any(|&d| d % self.k != 0) {
            return Err(Error::Config(format!(
                "perceiver k = {} does not divide token grid {:?}",
                self.k, grid.dims
            )));
        }
        Ok(PatchGrid::from_dims(grid.dims.map(|d| d / self.k)))
    }

    pub fn validate(&self, in_channels: usize, grid: &PatchGrid) -> Result<()> {
        self.output_grid(grid)?;
        if self.out_channels == 0 {
            return Err(Error::Config("perceiver.out_channels must be >= 1".into()));
        }
        let qformer = matches!(self.kind, PerceiverKind::GlobalQformer | PerceiverKind::LocalQformer);
        if qformer && (self.qformer_heads == 0 || in_channels % self.qformer_heads != 0 || self.qformer_layers == 0) {
            return Err(Error::Config(format!(
                "qformer needs >= 1 layer and heads dividing {in_channels}, got {} heads",
                self.qformer_heads
            )));
        }
        if self.kind == PerceiverKind::MlpMixer && self.mixer_expansion == 0 {
            return Err(Error::Config("perceiver.mixer_expansion must be >= 1".into()));
        }
        Ok(())
    }

    /// Exact parameter count for `C` input channels on `grid`.
    pub fn param_count(&self, in_channels: usize, grid: &PatchGrid) -> Result<usize> {
        let out = self.output_grid(grid)?;
        let (c, co, k3) = (in_channels, self.out_channels, self.k.pow(3));
        let (n, m) = (grid.n_tokens(), out.n_tokens());
        let proj = Linear::param_count(c, co, true);
        Ok(match self.kind {
            PerceiverKind::Conv3d => co * c * k3 + co,
            PerceiverKind::AvgPool | PerceiverKind::MaxPool => proj,
            PerceiverKind::MlpMixer => {
                2 * LayerNorm::param_count(c)
                    + Linear::param_count(n, m, true)
                    + Mlp::param_count(c, c * self.mixer_expansion, co)
            }
            PerceiverKind::GlobalQformer | PerceiverKind::LocalQformer => {
                m * c + self.qformer_layers * CrossBlock::param_count(c, 4) + LayerNorm::param_count(c) + proj
            }
        })
    }
}

/// `[B, N, C]` → `[B, C, H, W, D]` for token order `n = h·W·D + w·D + d`.
pub fn to_3d<T: Real>(g: &mut Graph<'_, T>, x: Var, grid: &PatchGrid) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.n_tokens() {
        return Err(Error::shape("to_3d", format!("tokens {s:?} do not match grid {:?}", grid.dims)));
    }
    let x = g.permute(x, &[0, 2, 1])?;
    let [h, w, d] = grid.dims;
    g.reshape(x, &[s[0], s[2], h, w, d])
}

/// `[B, C, H, W, D]` → `[B, H·W·D, C]`, inverse of [`to_3d`].
pub fn to_sequence<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::shape("to_sequence", format!("expected 5 axes, got {s:?}")));
    }
    let x = g.reshape(x, &[s[0], s[1], s[2] * s[3] * s[4]])?;
    g.permute(x, &[0, 2, 1])
}

/// Token indices of every `k³` block, block-major in output order and
/// x-fastest inside a block.
pub fn block_tokens(grid: &PatchGrid, k: usize) -> Vec<usize> {
    let out = PatchGrid::from_dims(grid.dims.map(|d| d / k));
    let mut idx = Vec::with_capacity(grid.n_tokens());
    for m in 0..out.n_tokens() {
        let [oh, ow, od] = out.cell(m);
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    idx.push(grid.token(oh * k + dx, ow * k + dy, od * k + dz));
                }
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
enum Body {
    Conv { w: ParamId, b: ParamId },
    Pool { max: bool, proj: Linear },
    Mixer { ln1: LayerNorm, token: Linear, ln2: LayerNorm, channel: Mlp },
    Qformer { local: bool, queries: ParamId, layers: Vec<CrossBlock>, norm: LayerNorm, proj: Linear },
}

#[derive(Clone, Debug)]
pub struct Perceiver {
    pub spec: PerceiverSpec,
    pub in_channels: usize,
    pub grid: PatchGrid,
    pub out_grid: PatchGrid,
    body: Body,
}

impl Perceiver {
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &PerceiverSpec, in_channels: usize, grid: PatchGrid, rng: &mut RngHandle) -> Result<Self> {
        spec.validate(in_channels, &grid)?;
        let out_grid = spec.output_grid(&grid)?;
        let (c, co, k) = (in_channels, spec.out_channels, spec.k);
        let (n, m) = (grid.n_tokens(), out_grid.n_tokens());
        let name = |s: &str| format!("{PREFIX}{s}");
        let body = match spec.kind {
            PerceiverKind::Conv3d => {
                let fan = c * k * k * k;
                Body::Conv {
                    w: store.xavier(name("conv.weight"), &[co, c, k, k, k], fan, co, rng),
                    b: store.zeros(name("conv.bias"), &[co]),
                }
            }
            PerceiverKind::AvgPool | PerceiverKind::MaxPool => Body::Pool {
                max: spec.kind == PerceiverKind::MaxPool,
                proj: Linear::new(store, &name("proj"), c, co, true, rng),
            },
            PerceiverKind::MlpMixer => Body::Mixer {
                ln1: LayerNorm::new(store, &name("ln1"), c),
                token: Linear::new(store, &name("token_mix"), n, m, true, rng),
                ln2: LayerNorm::new(store, &name("ln2"), c),
                channel: Mlp::new(store, &name("channel_mlp"), c, c * spec.mixer_expansion, co, rng),
            },
            PerceiverKind::GlobalQformer | PerceiverKind::LocalQformer => Body::Qformer {
                local: spec.kind == PerceiverKind::LocalQformer,
                queries: store.normal(name("queries"), &[m, c], 0.02, rng),
                layers: (0..spec.qformer_layers)
                    .map(|i| CrossBlock::new(store, &name(&format!("layers.{i}")), c, spec.qformer_heads, 4, rng))
                    .collect(),
                norm: LayerNorm::new(store, &name("norm"), c),
                proj: Linear::new(store, &name("proj"), c, co, true, rng),
            },
        };
        Ok(Self { spec: spec.clone(), in_channels, grid, out_grid, body })
    }

    pub fn n_out(&self) -> usize {
        self.out_grid.n_tokens()
    }

    /// `x: [B, N, C]` → `[B, N/k³, C']`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.grid.n_tokens() || s[2] != self.in_channels {
            return Err(Error::shape(
                "perceive",
                format!("input {s:?}, expected [B, {}, {}]", self.grid.n_tokens(), self.in_channels),
            ));
        }
        let b = s[0];
        let k = self.spec.k;
        let m = self.n_out();
        match &self.body {
            Body::Conv { w, b: bias } => {
                let x3 = to_3d(g, x, &self.grid)?;
                let (w, bias) = (g.param(*w), g.param(*bias));
                let y = g.conv3d(x3, w, Some(bias), k)?;
                to_sequence(g, y)
            }
            Body::Pool { max, proj } => {
                let x3 = to_3d(g, x, &self.grid)?;
                let y = if *max { g.max_pool3d(x3, k)? } else { g.avg_pool3d(x3, k)? };
                let y = to_sequence(g, y)?;
                proj.forward(g, y)
            }
            Body::Mixer { ln1, token, ln2, channel } => {
                let h = ln1.forward(g, x)?;
                let h = g.permute(h, &[0, 2, 1])?;
                let h = token.forward(g, h)?;
                let h = g.permute(h, &[0, 2, 1])?;
                let h = ln2.forward(g, h)?;
                channel.forward(g, h)
            }
            Body::Qformer { local, queries, layers, norm, proj } => {
                let c = self.in_channels;
                let table = g.param(*queries);
                let ids: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
                let q = g.embedding(table, &ids)?;
                let (mut q, ctx) = if *local {
                    let k3 = k * k * k;
                    let per_batch = block_tokens(&self.grid, k);
                    let idx: Vec<usize> = (0..b).flat_map(|_| per_batch.iter().copied()).collect();
                    let ctx = g.gather(x, &idx, m * k3)?;
                    let ctx = g.reshape(ctx, &[b * m, k3, c])?;
                    (g.reshape(q, &[b * m, 1, c])?, ctx)
                } else {
                    (g.reshape(q, &[b, m, c])?, x)
                };
                for layer in layers {
                    q = layer.forward(g, q, ctx, &mut Mode::Eval)?;
                }
                let q = g.reshape(q, &[b, m, c])?;
                let q = norm.forward(g, q)?;
                proj.forward(g, q)
            }
        }
    }
}
