//! A miniature end-to-end recipe small enough for unit-speed tests.

use std::path::{Path, PathBuf};

use vl3d::config::RunConfig;
use vl3d::lm::LmConfig;
use vl3d::mae::Vit3dConfig;
use vl3d::perceiver::{PerceiverKind, PerceiverSpec};
use vl3d::phantom::{gen_dataset, PhantomOptions};
use vl3d::pipeline::{pretrain_lm, pretrain_mae, sft, Dataset, SftStage};
use vl3d::tensor::write_checkpoint;

/// 16×16×8 volumes, a 4×4×4 token grid, an 8-token prefix and a
/// one-layer LM.
pub fn micro_config() -> RunConfig {
    let mut c = RunConfig::toy();
    c.preprocess.target_spacing_mm = [6.0, 6.0, 12.0];
    c.preprocess.target_dims = [16, 16, 8];
    c.vit = Vit3dConfig {
        input_dims: [16, 16, 8],
        patch_size: [4, 4, 2],
        embed_dim: 16,
        depth: 1,
        heads: 2,
        decoder_dim: 16,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        mask_ratio: 0.75,
    };
    c.perceiver = PerceiverSpec::new(PerceiverKind::Conv3d, 2, 32);
    c.lm.model = LmConfig { d_model: 32, layers: 1, heads: 2, max_seq_len: 128, ff_expansion: 2 };
    c.lm.lora.rank = 4;
    c.lm.lora.alpha = 8.0;
    c.train.mae_steps = 4;
    c.train.lm_epochs = 1;
    c.train.stage1_lr = 1e-3;
    c.train.stage2_lr = 1e-3;
    c.data = vl3d::config::DataConfig {
        volumes: 16,
        seed: 1,
        dims: [16, 16, 8],
        spacing: [6.0, 6.0, 12.0],
        test_fraction: 0.25,
    };
    c.validate().expect("micro config is valid");
    c
}

pub struct Recipe {
    pub data: Dataset,
    pub mae: PathBuf,
    pub base: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
}

/// Runs gen-data → pretrain-mae → pretrain-lm → sft 1 → sft 2 under `dir`.
pub fn run_recipe(cfg: &RunConfig, dir: &Path) -> Recipe {
    let d = &cfg.data;
    let opts = PhantomOptions { dims: d.dims, spacing: d.spacing, ..PhantomOptions::default() };
    let data_dir = dir.join("data");
    gen_dataset(&data_dir, d.volumes, d.seed, &opts, d.test_fraction).unwrap();
    let data = Dataset::open(&data_dir).unwrap();
    let quiet = &mut |_: &vl3d::pipeline::TrainLog| {};
    let mae = dir.join("mae.vckp");
    pretrain_mae(cfg, &data, &mae, quiet).unwrap();
    let base = dir.join("base.vckp");
    pretrain_lm(cfg, &data, &mae, &base, quiet).unwrap();
    let stage1 = dir.join("stage1.vckp");
    let out = sft(cfg, &data, SftStage::One, &base, None, quiet).unwrap();
    write_checkpoint(&out.checkpoint, &stage1).unwrap();
    let stage2 = dir.join("stage2.vckp");
    let out = sft(cfg, &data, SftStage::Two, &stage1, None, quiet).unwrap();
    write_checkpoint(&out.checkpoint, &stage2).unwrap();
    Recipe { data, mae, base, stage1, stage2 }
}
