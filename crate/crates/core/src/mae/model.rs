use super::{patchify, random_mask, sincos_pos_embed_3d, MaskPlan, PatchGrid, TokenBatch, Vit3dConfig};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, Mode};
use crate::rng::RngHandle;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::volume::NormalizedGrid;

/// The 3D ViT encoder: linear patch embedding, fixed positional table,
/// pre-norm blocks and a final layer norm. Parameters live under
/// `encoder.`.
#[derive(Clone, Debug)]
pub struct Vit3dEncoder {
    pub cfg: Vit3dConfig,
    pub grid: PatchGrid,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Vit3dEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &Vit3dConfig, rng: &mut RngHandle) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        Ok(Self {
            cfg: cfg.clone(),
            grid: cfg.grid()?,
            patch_embed: Linear::new(store, "encoder.patch_embed", cfg.patch_voxels(), c, true, rng),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), c, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(store, "encoder.norm", c),
        })
    }

    pub fn param_count(cfg: &Vit3dConfig) -> usize {
        Linear::param_count(cfg.patch_voxels(), cfg.embed_dim, true)
            + cfg.depth * Block::param_count(cfg.embed_dim, cfg.mlp_ratio)
            + LayerNorm::param_count(cfg.embed_dim)
    }

    /// Patch embedding plus positional table for all tokens: `[B, N, C]`.
    fn embed<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let x = self.patch_embed.forward(g, patches)?;
        let pos = g.constant(sincos_pos_embed_3d(&self.grid, self.cfg.embed_dim)?);
        g.add_broadcast(x, pos)
    }

    fn run_blocks<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var, mode: &mut Mode) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, None, mode)?;
        }
        self.norm.forward(g, x)
    }

    /// Encodes raw patches `[B, N, P]` with every token visible.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let x = self.embed(g, patches)?;
        self.run_blocks(g, x, &mut Mode::Eval)
    }

    /// Encodes only the kept tokens of each sample; `keep` holds `B·K`
    /// indices. Output `[B, K, C]`.
    pub fn forward_visible<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var, keep: &[usize], k: usize, mode: &mut Mode) -> Result<Var> {
        let x = self.embed(g, patches)?;
        let x = g.gather(x, keep, k)?;
        self.run_blocks(g, x, mode)
    }

    fn check_grids<T>(&self, grids: &[NormalizedGrid<T>]) -> Result<()> {
        if let Some(g) = grids.iter().find(|g| g.dims != self.cfg.input_dims) {
            return Err(Error::shape(
                "encode",
                format!("grid dims {:?} do not match configured input {:?}", g.dims, self.cfg.input_dims),
            ));
        }
        Ok(())
    }

    /// Unmasked encoding of preprocessed grids: `(B, N, C)` features.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, grids: &[NormalizedGrid<T>]) -> Result<TokenBatch<T>> {
        self.check_grids(grids)?;
        let patches = patchify(grids, self.cfg.patch_size)?;
        let mut g = Graph::with_params(store);
        let p = g.constant(patches.values);
        let y = self.forward(&mut g, p)?;
        TokenBatch::new(g.value(y).clone(), self.grid)
    }
}

/// Encoder plus the lightweight reconstruction decoder (`decoder.`).
#[derive(Clone, Debug)]
pub struct Mae {
    pub encoder: Vit3dEncoder,
    pub dec_embed: Linear,
    pub mask_token: ParamId,
    pub dec_blocks: Vec<Block>,
    pub dec_norm: LayerNorm,
    pub dec_pred: Linear,
}

pub struct MaeOutput {
    pub loss: Var,
    /// Reconstruction for every token in original order, `[B, N, P]`.
    pub pred: Var,
    pub plans: Vec<MaskPlan>,
}

impl Mae {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &Vit3dConfig, rng: &mut RngHandle) -> Result<Self> {
        let encoder = Vit3dEncoder::new(store, cfg, rng)?;
        let cd = cfg.decoder_dim;
        Ok(Self {
            encoder,
            dec_embed: Linear::new(store, "decoder.embed", cfg.embed_dim, cd, true, rng),
            mask_token: store.normal("decoder.mask_token", &[1, cd], 0.02, rng),
            dec_blocks: (0..cfg.decoder_depth)
                .map(|i| Block::new(store, &format!("decoder.blocks.{i}"), cd, cfg.decoder_heads, cfg.mlp_ratio, rng))
                .collect(),
            dec_norm: LayerNorm::new(store, "decoder.norm", cd),
            dec_pred: Linear::new(store, "decoder.pred", cd, cfg.patch_voxels(), true, rng),
        })
    }

    pub fn cfg(&self) -> &Vit3dConfig {
        &self.encoder.cfg
    }

    /// Masked reconstruction of `patches` (`[B, N, P]`) under the given
    /// per-sample plans, which must share one keep count.
    pub fn forward_with_plans<T: Real>(&self, g: &mut Graph<'_, T>, patches: &Tensor<T>, plans: Vec<MaskPlan>, mode: &mut Mode) -> Result<MaeOutput> {
        let s = patches.shape().to_vec();
        let (b, n) = (s[0], s[1]);
        if plans.len() != b || plans.iter().any(|p| p.n_tokens() != n || p.keep.len() != plans[0].keep.len()) {
            return Err(Error::shape("mae_forward", "mask plans do not match the batch"));
        }
        let k = plans[0].keep.len();
        let m = n - k;
        let keep: Vec<usize> = plans.iter().flat_map(|p| p.keep.iter().copied()).collect();
        let masked: Vec<usize> = plans.iter().flat_map(|p| p.masked.iter().copied()).collect();
        let restore: Vec<usize> = plans.iter().flat_map(|p| p.restore.iter().copied()).collect();

        let px = g.constant(patches.clone());
        let latent = self.encoder.forward_visible(g, px, &keep, k, mode)?;
        let y = self.dec_embed.forward(g, latent)?;
        let cd = self.cfg().decoder_dim;
        let table = g.param(self.mask_token);
        let mask_tokens = g.embedding(table, &vec![0; b * m])?;
        let mask_tokens = g.reshape(mask_tokens, &[b, m, cd])?;
        let y = g.concat(&[y, mask_tokens], 1)?;
        let y = g.gather(y, &restore, n)?;
        let pos = g.constant(sincos_pos_embed_3d(&self.encoder.grid, cd)?);
        let mut y = g.add_broadcast(y, pos)?;
        for blk in &self.dec_blocks {
            y = blk.forward(g, y, None, mode)?;
        }
        let y = self.dec_norm.forward(g, y)?;
        let pred = self.dec_pred.forward(g, y)?;

        let pred_masked = g.gather(pred, &masked, m)?;
        let target = masked_rows(patches, &masked, m);
        let loss = g.mse_loss(pred_masked, &target)?;
        Ok(MaeOutput { loss, pred, plans })
    }

    /// Samples a fresh mask per sample and reconstructs.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, patches: &Tensor<T>, rng: &mut RngHandle) -> Result<MaeOutput> {
        let (b, n) = (patches.shape()[0], patches.shape()[1]);
        let plans = (0..b).map(|_| random_mask(n, self.cfg().mask_ratio, rng)).collect();
        self.forward_with_plans(g, patches, plans, &mut Mode::Eval)
    }
}

/// Rows `idx` (`B·m` entries) of `[B, N, P]` as a `[B, m, P]` tensor.
pub(crate) fn masked_rows<T: Real>(x: &Tensor<T>, idx: &[usize], m: usize) -> Tensor<T> {
    let (n, p) = (x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(idx.len() * p);
    for (j, &i) in idx.iter().enumerate() {
        let b = j / m;
        out.extend_from_slice(&x.data()[(b * n + i) * p..(b * n + i + 1) * p]);
    }
    Tensor::new(vec![x.shape()[0], m, p], out).expect("row count matches")
}
