//! LoRA init-identity and freeze contract across the two SFT stages.

use vl3d::config::RunConfig;
use vl3d::lm::LmExample;
use vl3d::nn::Mode;
use vl3d::pipeline::{load_model, load_grid, sft_model, SftStage, Vlm, ENCODER_PREFIX};
use vl3d::tensor::{read_checkpoint, Checkpoint, Graph, ParamStore};

use super::recipe::Recipe;

pub struct FreezeReport {
    /// Samples whose eval-mode logits differ between the stage-1 model and
    /// the stage-2 model before any stage-2 step.
    pub step0_mismatches: usize,
    pub samples: usize,
    /// Encoder or LM tensors that changed between checkpoints.
    pub frozen_changed: Vec<String>,
    /// Whether SFT actually moved the perceiver and the adapters.
    pub perceiver_trained: bool,
    pub lora_trained: bool,
}

impl FreezeReport {
    pub fn holds(&self) -> bool {
        self.step0_mismatches == 0 && self.frozen_changed.is_empty() && self.perceiver_trained && self.lora_trained
    }
}

fn logits_bits(vlm: &Vlm, store: &ParamStore<f32>, feats: &vl3d::tensor::Tensor<f32>, ex: &LmExample) -> Vec<u32> {
    let mut g = Graph::with_params(store);
    let p = vlm.prefix(&mut g, feats).unwrap();
    let l = vlm.lm.logits(&mut g, Some(p), &[ex.ids()], &mut Mode::Eval).unwrap();
    g.value(l).data().iter().map(|v| v.to_bits()).collect()
}

fn differs(a: &Checkpoint, b: &Checkpoint, name: &str) -> bool {
    a.get(name) != b.get(name)
}

pub fn check(cfg: &RunConfig, r: &Recipe, samples: usize) -> FreezeReport {
    let (m1, s1) = load_model(cfg, &r.stage1).unwrap();
    let c1 = read_checkpoint(&r.stage1).unwrap();
    let (m2, s2) = sft_model(cfg, SftStage::Two, &c1, &r.stage1, None).unwrap();
    let mut mismatches = 0;
    let picked: Vec<_> = r.data.train.iter().take(samples).collect();
    for s in &picked {
        let grid = load_grid(&r.data.dir, &s.volume_path, &cfg.preprocess).unwrap();
        let feats = m1.encoder.encode(&s1, &[grid]).unwrap().values;
        let ex = LmExample { prompt: m1.vocab.encode_words(&s.question), answer: m1.vocab.encode_words(&s.answer) };
        if logits_bits(&m1, &s1, &feats, &ex) != logits_bits(&m2, &s2, &feats, &ex) {
            mismatches += 1;
        }
    }

    let (mae, base, c2) =
        (read_checkpoint(&r.mae).unwrap(), read_checkpoint(&r.base).unwrap(), read_checkpoint(&r.stage2).unwrap());
    let mut frozen_changed = Vec::new();
    for (name, _, _) in &base.tensors {
        let from_mae = name.starts_with(ENCODER_PREFIX) && differs(&mae, &base, name);
        if from_mae || differs(&base, &c1, name) || differs(&base, &c2, name) {
            frozen_changed.push(name.clone());
        }
    }
    let moved = |prefix: &str, a: &Checkpoint, b: &Checkpoint| {
        a.tensors.iter().filter(|(n, _, _)| n.starts_with(prefix)).any(|(n, _, _)| differs(a, b, n))
    };
    let zero_b = c2
        .tensors
        .iter()
        .filter(|(n, _, _)| n.starts_with("lora.") && n.ends_with(".b"))
        .all(|(_, _, v)| v.iter().all(|&x| x == 0.0));
    FreezeReport {
        step0_mismatches: mismatches,
        samples: picked.len(),
        frozen_changed,
        perceiver_trained: moved("perceiver.", &c1, &c2),
        lora_trained: c2.tensors.iter().any(|(n, _, _)| n.starts_with("lora.")) && !zero_b,
    }
}
