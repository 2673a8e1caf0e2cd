//! Anisotropic 3D ViT tokenizer and masked-autoencoder pretraining.

mod mask;
mod model;
mod patch;
mod posembed;
mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use mask::{random_mask, MaskPlan};
pub use model::{Mae, MaeOutput, Vit3dEncoder};
pub use patch::{patchify, unpatchify};
pub use posembed::sincos_pos_embed_3d;
pub use pretrain::{pretrain_loop, PretrainConfig, PretrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vit3dConfig {
    pub input_dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
}

impl Vit3dConfig {
    pub fn toy() -> Self {
        Self {
            input_dims: [64, 64, 32],
            patch_size: [8, 8, 4],
            embed_dim: 64,
            depth: 2,
            heads: 4,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
        }
    }

    /// ViT-Base depth/heads with the embedding width doubled to 1536 and
    /// the standard MAE decoder.
    pub fn paper_scale() -> Self {
        Self {
            input_dims: [224, 224, 112],
            patch_size: [16, 16, 8],
            embed_dim: 1536,
            depth: 12,
            heads: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 4,
            mask_ratio: 0.75,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.input_dims, self.patch_size)
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let heads_ok = |dim: usize, heads: usize| heads > 0 && dim % heads == 0;
        if !heads_ok(self.embed_dim, self.heads) {
            return Err(Error::Config(format!(
                "vit.embed_dim {} is not divisible by vit.heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !heads_ok(self.decoder_dim, self.decoder_heads) {
            return Err(Error::Config(format!(
                "vit.decoder_dim {} is not divisible by vit.decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("vit.mask_ratio must lie in (0, 1), got {}", self.mask_ratio)));
        }
        if self.embed_dim < 6 || self.decoder_dim < 6 {
            return Err(Error::Config("vit.embed_dim and vit.decoder_dim must be >= 6 for 3D positional embeddings".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("vit.mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// The token grid `(H, W, D)` obtained by tiling the input with patches;
/// `H` runs along x, `W` along y, `D` along z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub dims: [usize; 3],
}

impl PatchGrid {
    pub fn new(input: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if patch[a] == 0 || input[a] == 0 || input[a] % patch[a] != 0 {
                return Err(Error::Config(format!(
                    "patch size {patch:?} does not divide input dims {input:?}"
                )));
            }
        }
        Ok(Self { dims: std::array::from_fn(|a| input[a] / patch[a]) })
    }

    pub fn from_dims(dims: [usize; 3]) -> Self {
        Self { dims }
    }

    pub fn n_tokens(&self) -> usize {
        self.dims.iter().product()
    }

    /// Token index of grid cell `(h, w, d)`.
    pub fn token(&self, h: usize, w: usize, d: usize) -> usize {
        h * self.dims[1] * self.dims[2] + w * self.dims[2] + d
    }

    pub fn cell(&self, n: usize) -> [usize; 3] {
        let wd = self.dims[1] * self.dims[2];
        [n / wd, (n % wd) / self.dims[2], n % self.dims[2]]
    }
}

/// Batched token sequences `[B, N, C]` tied to their spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T = f32> {
    pub values: Tensor<T>,
    pub grid: PatchGrid,
}

impl<T: crate::tensor::Real> TokenBatch<T> {
    pub fn new(values: Tensor<T>, grid: PatchGrid) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] != grid.n_tokens() {
            return Err(Error::shape(
                "token_batch",
                format!("values {s:?} do not match grid {:?} ({} tokens)", grid.dims, grid.n_tokens()),
            ));
        }
        Ok(Self { values, grid })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }
}
