//! Run configuration: one TOML file describing preprocessing, model shapes
//! and training schedules, with `toy` and `paper-scale` presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LoraConfig};
use crate::mae::{PatchGrid, Vit3dConfig};
use crate::perceiver::{PerceiverKind, PerceiverSpec};
use crate::volume::PreprocessConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    #[serde(flatten)]
    pub model: LmConfig,
    pub lora: LoraConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mae_steps: usize,
    pub mae_batch_size: usize,
    pub mae_lr: f64,
    /// Learning-rate decay per epoch, shared by every stage.
    pub lr_decay: f64,
    pub lm_epochs: usize,
    pub lm_lr: f64,
    pub sft_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    /// Samples whose volume fails to load before SFT gives up.
    pub error_budget: usize,
    pub max_new_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub volumes: usize,
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub vit: Vit3dConfig,
    pub perceiver: PerceiverSpec,
    pub lm: LmSection,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const PRESETS: [&str; 2] = ["toy", "paper-scale"];

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            preprocess: PreprocessConfig::toy(),
            vit: Vit3dConfig::toy(),
            perceiver: PerceiverSpec::new(PerceiverKind::Conv3d, 2, 64),
            lm: LmSection { model: LmConfig::toy(), lora: LoraConfig::default() },
            train: TrainConfig {
                seed: 0,
                mae_steps: 300,
                mae_batch_size: 4,
                mae_lr: 1.5e-4,
                lr_decay: 0.95,
                lm_epochs: 2,
                lm_lr: 1e-3,
                sft_epochs: 1,
                stage1_lr: 1e-4,
                stage2_lr: 5e-5,
                batch_size: 8,
                error_budget: 0,
                max_new_tokens: 48,
            },
            data: DataConfig { volumes: 600, seed: 1, dims: [48, 48, 24], spacing: [2.0, 2.0, 4.0], test_fraction: 0.1 },
        }
    }

    /// Published shapes: 224×224×112 input, 16×16×8 patches, width 1536,
    /// `k = 2`. Meant for shape audits; training at this size is not
    /// practical on a CPU.
    pub fn paper_scale() -> Self {
        let mut c = Self::toy();
        c.preprocess = PreprocessConfig::paper_scale();
        c.vit = Vit3dConfig::paper_scale();
        c.lm.model = LmConfig { d_model: 4096, layers: 32, heads: 32, max_seq_len: 768, ff_expansion: 4 };
        c.perceiver = PerceiverSpec::new(PerceiverKind::Conv3d, 2, 4096);
        c.train.batch_size = 8;
        c.data.dims = [150, 150, 40];
        c.data.spacing = [2.25, 2.25, 8.4];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper-scale" | "paper_scale" => Ok(Self::paper_scale()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn token_grid(&self) -> Result<PatchGrid> {
        self.vit.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if self.preprocess.target_dims != self.vit.input_dims {
            return Err(Error::Config(format!(
                "vit.input_dims {:?} must equal preprocess.target_dims {:?}",
                self.vit.input_dims, self.preprocess.target_dims
            )));
        }
        self.vit.validate()?;
        let grid = self.vit.grid()?;
        self.perceiver.validate(self.vit.embed_dim, &grid)?;
        if self.perceiver.out_channels != self.lm.model.d_model {
            return Err(Error::Config(format!(
                "perceiver.out_channels {} must equal lm.d_model {}",
                self.perceiver.out_channels, self.lm.model.d_model
            )));
        }
        let m = self.perceiver.output_grid(&grid)?.n_tokens();
        self.lm.model.validate(m)?;
        self.lm.lora.validate()?;
        let t = &self.train;
        if t.mae_steps == 0 || t.mae_batch_size == 0 || t.batch_size == 0 || t.sft_epochs == 0 {
            return Err(Error::Config("train: step, epoch and batch counts must be >= 1".into()));
        }
        for (name, lr) in [("mae_lr", t.mae_lr), ("lm_lr", t.lm_lr), ("stage1_lr", t.stage1_lr), ("stage2_lr", t.stage2_lr)] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("train.{name} must be > 0, got {lr}")));
            }
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::Config(format!("train.lr_decay must lie in (0, 1], got {}", t.lr_decay)));
        }
        let d = &self.data;
        if d.dims.iter().any(|&v| v == 0) || d.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("data.dims and data.spacing must be positive".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config(format!("data.test_fraction must lie in [0, 1), got {}", d.test_fraction)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert_ne!(RunConfig::toy().hash(), RunConfig::paper_scale().hash());
    }

    #[test]
    fn cross_field_errors_name_the_fields() {
        let mut c = RunConfig::toy();
        c.perceiver.k = 3;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("k = 3"), "{e}");

        let mut c = RunConfig::toy();
        c.perceiver.out_channels = 32;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("lm.d_model"), "{e}");

        let mut c = RunConfig::toy();
        c.vit.input_dims = [64, 64, 64];
        assert!(c.validate().unwrap_err().to_string().contains("preprocess.target_dims"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::toy().to_toml().replace("[train]", "[train]\nbogus = 1");
        let e = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }
}
