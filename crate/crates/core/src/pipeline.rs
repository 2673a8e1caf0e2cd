//! End-to-end recipe: MAE pretraining, text-only LM pretraining, two-stage
//! supervised fine-tuning, generation and evaluation.
//!
//! Every stage draws randomness from its own stream of `train.seed`, so a
//! stage's output depends only on its inputs and the config.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmExample, Vocab, LM_PREFIX, LORA_PREFIX};
use crate::mae::{pretrain_loop, Mae, PretrainConfig, PretrainLog, Vit3dEncoder};
use crate::metrics::{classification_metrics, parse_diagnosis_answer, ClassificationMetrics, Diagnosis, TextScores};
use crate::nn::Mode;
use crate::perceiver::{Perceiver, PerceiverKind, PerceiverSpec, PREFIX as PERCEIVER_PREFIX};
use crate::phantom::{read_jsonl, read_manifest, InstructionSample, Manifest, Task};
use crate::rng::RngHandle;
use crate::tensor::{adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::volume::{preprocess, read_rvol, NormalizedGrid, PreprocessConfig};

pub const ENCODER_PREFIX: &str = "encoder.";

const STREAM_MAE_INIT: u64 = 10;
const STREAM_MAE_TRAIN: u64 = 11;
const STREAM_LM_INIT: u64 = 20;
const STREAM_LM_TRAIN: u64 = 21;
const STREAM_PERCEIVER_INIT: u64 = 30;
const STREAM_STAGE1: u64 = 31;
const STREAM_LORA_INIT: u64 = 40;
const STREAM_STAGE2: u64 = 41;

/// One optimizer step in a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl From<&PretrainLog> for TrainLog {
    fn from(l: &PretrainLog) -> Self {
        Self { step: l.step, loss: l.loss, lr: l.lr }
    }
}

/// A generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<InstructionSample>,
    pub test: Vec<InstructionSample>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?;
        let train = read_jsonl(dir.join("train.jsonl"))?;
        let test = read_jsonl(dir.join("test.jsonl"))?;
        Ok(Self { dir, manifest, train, test })
    }

    /// Distinct volume paths of the training split, sorted.
    pub fn train_volumes(&self) -> Vec<String> {
        self.train.iter().map(|s| s.volume_path.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

pub fn load_grid(dir: &Path, volume_path: &str, cfg: &PreprocessConfig) -> Result<NormalizedGrid<f32>> {
    let v = read_rvol(dir.join(volume_path))?;
    Ok(preprocess(&v, cfg)?.to_f32())
}

fn stamp(cfg: &RunConfig, kind: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("kind".into(), json!(kind));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("seed".into(), json!(cfg.train.seed));
    m
}

fn expect_kind(ckpt: &Checkpoint, path: &Path, kinds: &[&str]) -> Result<()> {
    let kind = ckpt.metadata.get("kind").and_then(Value::as_str).unwrap_or("");
    if !kinds.contains(&kind) {
        return Err(Error::Checkpoint(format!(
            "{} is a {kind:?} checkpoint, expected one of {kinds:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Vocabulary stored in a checkpoint, checked against its recorded hash.
pub fn checkpoint_vocab(ckpt: &Checkpoint) -> Result<Vocab> {
    let words = ckpt.metadata.get("vocab").ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
    let vocab: Vocab = serde_json::from_value(words.clone()).map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
    let stored = ckpt.metadata.get("vocab_hash").and_then(Value::as_str).unwrap_or("");
    if stored != vocab.hash() {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash mismatch: checkpoint records {stored:?}, vocabulary hashes to {:?}",
            vocab.hash()
        )));
    }
    Ok(vocab)
}

fn checkpoint_spec(ckpt: &Checkpoint) -> Result<PerceiverSpec> {
    let v = ckpt.metadata.get("perceiver").ok_or_else(|| Error::Checkpoint("checkpoint has no perceiver spec".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("bad perceiver spec: {e}")))
}

fn checkpoint_stage(ckpt: &Checkpoint) -> Option<u64> {
    ckpt.metadata.get("stage").and_then(Value::as_u64)
}

fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// MAE pretraining

pub fn pretrain_mae(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    on_step: &mut dyn FnMut(&TrainLog),
) -> Result<Vec<TrainLog>> {
    let paths = data.train_volumes();
    if paths.is_empty() {
        return Err(Error::Data("training split has no volumes".into()));
    }
    let grids: Vec<NormalizedGrid<f32>> =
        paths.par_iter().map(|p| load_grid(&data.dir, p, &cfg.preprocess)).collect::<Result<_>>()?;
    let root = RngHandle::new(cfg.train.seed);
    let mut store = ParamStore::<f32>::new();
    let mae = Mae::new(&mut store, &cfg.vit, &mut root.fork(STREAM_MAE_INIT))?;
    let pcfg = PretrainConfig {
        steps: cfg.train.mae_steps,
        batch_size: cfg.train.mae_batch_size,
        lr: cfg.train.mae_lr,
        lr_decay: cfg.train.lr_decay,
    };
    let log = pretrain_loop(&mae, &mut store, &grids, &pcfg, &mut root.fork(STREAM_MAE_TRAIN), |l| on_step(&l.into()))?;
    let mut meta = stamp(cfg, "mae");
    meta.insert("vit".into(), serde_json::to_value(&cfg.vit).expect("config serializes"));
    write_checkpoint(&Checkpoint::from_store(&store, meta), out)?;
    Ok(log.iter().map(TrainLog::from).collect())
}

// ---------------------------------------------------------------------------
// The assembled vision-language model

/// Encoder, perceiver and language model sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Vlm {
    pub encoder: Vit3dEncoder,
    pub perceiver: Perceiver,
    pub lm: LanguageModel,
    pub vocab: Vocab,
}

impl Vlm {
    /// Fresh model; every part draws from its own seed stream.
    pub fn new(store: &mut ParamStore<f32>, cfg: &RunConfig, spec: &PerceiverSpec, vocab: Vocab) -> Result<Self> {
        let root = RngHandle::new(cfg.train.seed);
        let encoder = Vit3dEncoder::new(store, &cfg.vit, &mut root.fork(STREAM_MAE_INIT))?;
        let perceiver = Perceiver::new(store, spec, cfg.vit.embed_dim, encoder.grid, &mut root.fork(STREAM_PERCEIVER_INIT))?;
        let lm = LanguageModel::new(store, &cfg.lm.model, vocab.len(), &mut root.fork(STREAM_LM_INIT))?;
        cfg.lm.model.validate(perceiver.n_out())?;
        if spec.out_channels != cfg.lm.model.d_model {
            return Err(Error::Config(format!(
                "perceiver.out_channels {} must equal lm.d_model {}",
                spec.out_channels, cfg.lm.model.d_model
            )));
        }
        Ok(Self { encoder, perceiver, lm, vocab })
    }

    pub fn attach_lora(&mut self, store: &mut ParamStore<f32>, cfg: &RunConfig) -> Result<()> {
        let root = RngHandle::new(cfg.train.seed);
        self.lm.attach_lora(store, &cfg.lm.lora, &mut root.fork(STREAM_LORA_INIT))
    }

    /// Rebuilds a fine-tuned model from a stage checkpoint.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        let vocab = checkpoint_vocab(ckpt)?;
        let spec = checkpoint_spec(ckpt)?;
        let mut store = ParamStore::new();
        let mut vlm = Self::new(&mut store, cfg, &spec, vocab)?;
        if checkpoint_stage(ckpt) == Some(2) {
            vlm.attach_lora(&mut store, cfg)?;
        }
        ckpt.load_into(&mut store, &[])?;
        Ok((vlm, store))
    }

    /// Image prefix `[B, M, d]` from cached encoder features `[B, N, C]`.
    pub fn prefix(&self, g: &mut Graph<'_, f32>, features: &Tensor<f32>) -> Result<Var> {
        let x = g.constant(features.clone());
        self.perceiver.forward(g, x)
    }

    pub fn loss(&self, g: &mut Graph<'_, f32>, features: &Tensor<f32>, batch: &[LmExample], mode: &mut Mode) -> Result<Var> {
        let p = self.prefix(g, features)?;
        Ok(self.lm.forward(g, Some(p), batch, mode)?.1)
    }

    /// Greedy answer for one volume's features `[1, N, C]`.
    pub fn answer(&self, store: &ParamStore<f32>, features: &Tensor<f32>, question: &str, max_new_tokens: usize) -> Result<String> {
        let prefix = {
            let mut g = Graph::with_params(store);
            let p = self.prefix(&mut g, features)?;
            g.value(p).clone()
        };
        let ids = self.lm.generate(store, Some(&prefix), &self.vocab.encode_words(question), max_new_tokens)?;
        Ok(self.vocab.decode(&ids))
    }
}

/// Encoder features `[N, C]` per volume path.
pub struct FeatureCache {
    features: BTreeMap<String, Tensor<f32>>,
}

impl FeatureCache {
    /// Preprocesses and encodes every listed volume. Volumes that fail to
    /// load are reported; more than `error_budget` failures abort.
    pub fn build(
        encoder: &Vit3dEncoder,
        store: &ParamStore<f32>,
        dir: &Path,
        paths: &[String],
        pre: &PreprocessConfig,
        error_budget: usize,
    ) -> Result<(Self, Vec<(String, Error)>)> {
        let results: Vec<(String, Result<Tensor<f32>>)> = paths
            .par_iter()
            .map(|p| {
                let r = load_grid(dir, p, pre).and_then(|g| {
                    let t = encoder.encode(store, &[g])?.values;
                    let s = t.shape().to_vec();
                    t.reshape(vec![s[1], s[2]])
                });
                (p.clone(), r)
            })
            .collect();
        let mut features = BTreeMap::new();
        let mut failures = Vec::new();
        for (p, r) in results {
            match r {
                Ok(t) => {
                    features.insert(p, t);
                }
                Err(e) => failures.push((p, e)),
            }
        }
        if failures.len() > error_budget {
            let (p, e) = &failures[0];
            return Err(Error::Data(format!(
                "{} volumes failed to load (budget {error_budget}); first: {p}: {e}",
                failures.len()
            )));
        }
        Ok((Self { features }, failures))
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<f32>> {
        self.features.get(path)
    }

    /// Stacks the features of `paths` into `[B, N, C]`.
    pub fn batch(&self, paths: &[&str]) -> Result<Tensor<f32>> {
        let first = self.get(paths[0]).ok_or_else(|| Error::Data(format!("no features for {}", paths[0])))?;
        let (n, c) = (first.shape()[0], first.shape()[1]);
        let mut data = Vec::with_capacity(paths.len() * n * c);
        for p in paths {
            let f = self.get(p).ok_or_else(|| Error::Data(format!("no features for {p}")))?;
            data.extend_from_slice(f.data());
        }
        Tensor::new(vec![paths.len(), n, c], data)
    }
}

fn example(vocab: &Vocab, s: &InstructionSample) -> LmExample {
    LmExample { prompt: vocab.encode_words(&s.question), answer: vocab.encode_words(&s.answer) }
}

/// Minibatch Adam over `n` items for `epochs` passes in shuffled order,
/// the last batch of an epoch possibly short.
#[allow(clippy::too_many_arguments)]
fn train_epochs(
    store: &mut ParamStore<f32>,
    n: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    decay: f64,
    rng: &RngHandle,
    loss_fn: &dyn Fn(&mut Graph<'_, f32>, &[usize], &mut Mode) -> Result<Var>,
    on_step: &mut dyn FnMut(&TrainLog),
) -> Result<Vec<TrainLog>> {
    if n == 0 {
        return Err(Error::Data("no training examples".into()));
    }
    let mut order_rng = rng.fork(1);
    let mut dropout_rng = rng.fork(2);
    let mut adam = AdamState::new(AdamConfig { lr, decay, ..AdamConfig::default() });
    let mut log = Vec::new();
    for epoch in 0..epochs {
        if epoch > 0 {
            adam.end_epoch();
        }
        let order = order_rng.permutation(n);
        for idx in order.chunks(batch) {
            let lr = adam.lr();
            let (loss, grads) = {
                let mut g = Graph::with_params(store);
                let l = loss_fn(&mut g, idx, &mut Mode::Train(&mut dropout_rng))?;
                (g.value(l).item() as f64, g.backward(l)?)
            };
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite loss at step {}", log.len())));
            }
            adam_step(store, &grads, &mut adam);
            let rec = TrainLog { step: log.len(), loss, lr };
            on_step(&rec);
            log.push(rec);
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Text-only LM pretraining

/// Trains the language model on the training split's question/answer text
/// with an all-zero image prefix of the perceiver's output length, standing
/// in for a pretrained LLM. Writes a `base` checkpoint holding the MAE
/// encoder, the LM and the vocabulary.
pub fn pretrain_lm(
    cfg: &RunConfig,
    data: &Dataset,
    mae_ckpt: &Path,
    out: &Path,
    on_step: &mut dyn FnMut(&TrainLog),
) -> Result<Vec<TrainLog>> {
    let mae = read_ckpt(mae_ckpt)?;
    expect_kind(&mae, mae_ckpt, &["mae"])?;
    let corpus: Vec<&str> = data.train.iter().flat_map(|s| [s.question.as_str(), s.answer.as_str()]).collect();
    let vocab = Vocab::build(corpus, 1)?;
    let mut store = ParamStore::new();
    let vlm = Vlm::new(&mut store, cfg, &cfg.perceiver, vocab)?;
    mae.subset(&[ENCODER_PREFIX]).load_into(&mut store, &[PERCEIVER_PREFIX, LM_PREFIX])?;
    store.freeze_all();
    store.set_trainable(LM_PREFIX, true);

    let examples: Vec<LmExample> = data.train.iter().map(|s| example(&vlm.vocab, s)).collect();
    let (m, d) = (vlm.perceiver.n_out(), cfg.lm.model.d_model);
    let loss_fn = |g: &mut Graph<'_, f32>, idx: &[usize], mode: &mut Mode| -> Result<Var> {
        let batch: Vec<LmExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let prefix = g.constant(Tensor::zeros(vec![idx.len(), m, d]));
        Ok(vlm.lm.forward(g, Some(prefix), &batch, mode)?.1)
    };
    let root = RngHandle::new(cfg.train.seed);
    let log = train_epochs(
        &mut store,
        examples.len(),
        cfg.train.lm_epochs,
        cfg.train.batch_size,
        cfg.train.lm_lr,
        cfg.train.lr_decay,
        &root.fork(STREAM_LM_TRAIN),
        &loss_fn,
        on_step,
    )?;
    let mut meta = stamp(cfg, "base");
    meta.insert("vocab".into(), serde_json::to_value(&vlm.vocab).expect("vocab serializes"));
    meta.insert("vocab_hash".into(), json!(vlm.vocab.hash()));
    let ckpt = Checkpoint::from_store(&store, meta).subset(&[ENCODER_PREFIX, LM_PREFIX]);
    write_checkpoint(&ckpt, out)?;
    Ok(log)
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SftStage {
    /// Perceiver only.
    One,
    /// Perceiver and LoRA adapters.
    Two,
}

impl SftStage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(SftStage::One),
            2 => Ok(SftStage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u64 {
        match self {
            SftStage::One => 1,
            SftStage::Two => 2,
        }
    }
}

pub struct SftOutcome {
    pub log: Vec<TrainLog>,
    pub skipped: Vec<(String, Error)>,
    pub checkpoint: Checkpoint,
}

/// Builds the stage's model from its input checkpoint. Stage 1 starts from
/// a `base` checkpoint with a fresh perceiver of kind `spec` (falling back
/// to the config's); stage 2 starts from a stage-1 checkpoint and adds
/// zero-initialized LoRA adapters.
pub fn sft_model(cfg: &RunConfig, stage: SftStage, init: &Checkpoint, init_path: &Path, spec: Option<&PerceiverSpec>) -> Result<(Vlm, ParamStore<f32>)> {
    let vocab = checkpoint_vocab(init)?;
    let mut store = ParamStore::new();
    let vlm = match stage {
        SftStage::One => {
            expect_kind(init, init_path, &["base"])?;
            let spec = spec.unwrap_or(&cfg.perceiver);
            let vlm = Vlm::new(&mut store, cfg, spec, vocab)?;
            init.load_into(&mut store, &[PERCEIVER_PREFIX])?;
            vlm
        }
        SftStage::Two => {
            expect_kind(init, init_path, &["sft"])?;
            if checkpoint_stage(init) != Some(1) {
                return Err(Error::Checkpoint(format!("{}: stage 2 needs a stage-1 checkpoint", init_path.display())));
            }
            let mut vlm = Vlm::new(&mut store, cfg, &checkpoint_spec(init)?, vocab)?;
            vlm.attach_lora(&mut store, cfg)?;
            init.load_into(&mut store, &[LORA_PREFIX])?;
            vlm
        }
    };
    store.freeze_all();
    store.set_trainable(PERCEIVER_PREFIX, true);
    if stage == SftStage::Two {
        store.set_trainable(LORA_PREFIX, true);
    }
    Ok((vlm, store))
}

pub fn sft(
    cfg: &RunConfig,
    data: &Dataset,
    stage: SftStage,
    init_path: &Path,
    spec: Option<&PerceiverSpec>,
    on_step: &mut dyn FnMut(&TrainLog),
) -> Result<SftOutcome> {
    let init = read_ckpt(init_path)?;
    let (vlm, mut store) = sft_model(cfg, stage, &init, init_path, spec)?;
    let (cache, skipped) = FeatureCache::build(
        &vlm.encoder,
        &store,
        &data.dir,
        &data.train_volumes(),
        &cfg.preprocess,
        cfg.train.error_budget,
    )?;
    let samples: Vec<&InstructionSample> = data.train.iter().filter(|s| cache.get(&s.volume_path).is_some()).collect();
    let examples: Vec<LmExample> = samples.iter().map(|s| example(&vlm.vocab, s)).collect();
    let loss_fn = |g: &mut Graph<'_, f32>, idx: &[usize], mode: &mut Mode| -> Result<Var> {
        let paths: Vec<&str> = idx.iter().map(|&i| samples[i].volume_path.as_str()).collect();
        let feats = cache.batch(&paths)?;
        let batch: Vec<LmExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        vlm.loss(g, &feats, &batch, mode)
    };
    let (lr, stream) = match stage {
        SftStage::One => (cfg.train.stage1_lr, STREAM_STAGE1),
        SftStage::Two => (cfg.train.stage2_lr, STREAM_STAGE2),
    };
    let root = RngHandle::new(cfg.train.seed);
    let log = train_epochs(
        &mut store,
        examples.len(),
        cfg.train.sft_epochs,
        cfg.train.batch_size,
        lr,
        cfg.train.lr_decay,
        &root.fork(stream),
        &loss_fn,
        on_step,
    )?;
    let mut meta = stamp(cfg, "sft");
    meta.insert("stage".into(), json!(stage.number()));
    meta.insert("perceiver".into(), serde_json::to_value(&vlm.perceiver.spec).expect("spec serializes"));
    meta.insert("vocab".into(), serde_json::to_value(&vlm.vocab).expect("vocab serializes"));
    meta.insert("vocab_hash".into(), json!(vlm.vocab.hash()));
    Ok(SftOutcome { log, skipped, checkpoint: Checkpoint::from_store(&store, meta) })
}

// ---------------------------------------------------------------------------
// Generation and evaluation

pub fn load_model(cfg: &RunConfig, ckpt_path: &Path) -> Result<(Vlm, ParamStore<f32>)> {
    let ckpt = read_ckpt(ckpt_path)?;
    expect_kind(&ckpt, ckpt_path, &["sft"])?;
    Vlm::from_checkpoint(cfg, &ckpt)
}

/// Answers `question` about the RVOL file at `volume`.
pub fn generate(cfg: &RunConfig, vlm: &Vlm, store: &ParamStore<f32>, volume: &Path, question: &str) -> Result<String> {
    let v = read_rvol(volume)?;
    let g = preprocess(&v, &cfg.preprocess)?.to_f32();
    let feats = vlm.encoder.encode(store, &[g])?.values;
    vlm.answer(store, &feats, question, cfg.train.max_new_tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Report,
    Vqa,
    Diagnosis,
}

impl EvalTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "report" => Ok(EvalTask::Report),
            "vqa" => Ok(EvalTask::Vqa),
            "diagnosis" => Ok(EvalTask::Diagnosis),
            _ => Err(Error::Config(format!("unknown task {s:?}; expected report, vqa or diagnosis"))),
        }
    }

    fn matches(self, t: Task) -> bool {
        matches!(
            (self, t),
            (EvalTask::Report, Task::Report) | (EvalTask::Vqa, Task::Vqa) | (EvalTask::Diagnosis, Task::Diagnosis)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub question: String,
    pub reference: String,
    pub prediction: String,
    #[serde(flatten)]
    pub scores: TextScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disease: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Diagnosis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(flatten)]
    pub text: TextScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<ClassificationMetrics>,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub n: usize,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub per_sample: Vec<SampleResult>,
}

pub fn evaluate(cfg: &RunConfig, vlm: &Vlm, store: &ParamStore<f32>, data: &Dataset, task: EvalTask) -> Result<EvalReport> {
    let samples: Vec<&InstructionSample> = data.test.iter().filter(|s| task.matches(s.task)).collect();
    if samples.is_empty() {
        return Err(Error::Data(format!("test split has no {task:?} samples")));
    }
    let paths: Vec<String> = samples.iter().map(|s| s.volume_path.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let (cache, _) = FeatureCache::build(&vlm.encoder, store, &data.dir, &paths, &cfg.preprocess, 0)?;
    let per_sample: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| {
            let feats = cache.batch(&[s.volume_path.as_str()])?;
            let prediction = vlm.answer(store, &feats, &s.question, cfg.train.max_new_tokens)?;
            Ok(SampleResult {
                id: s.id.clone(),
                question: s.question.clone(),
                reference: s.answer.clone(),
                scores: TextScores::score(&prediction, &s.answer),
                disease: s.label.as_ref().map(|l| l.disease.clone()),
                label: s.label.as_ref().map(|l| l.present),
                parsed: s.label.as_ref().map(|_| parse_diagnosis_answer(&prediction)),
                prediction,
            })
        })
        .collect::<Result<_>>()?;
    let text = TextScores::mean(&per_sample.iter().map(|r| r.scores.clone()).collect::<Vec<_>>());
    let diagnosis = if task == EvalTask::Diagnosis {
        let preds: Vec<Diagnosis> = per_sample.iter().map(|r| r.parsed.unwrap_or(Diagnosis::Unknown)).collect();
        let labels: Vec<bool> = per_sample.iter().map(|r| r.label.unwrap_or(false)).collect();
        Some(classification_metrics(&preds, &labels)?)
    } else {
        None
    };
    Ok(EvalReport {
        task,
        n: per_sample.len(),
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        metrics: EvalMetrics { text, diagnosis },
        per_sample,
    })
}

// ---------------------------------------------------------------------------
// Perceiver ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: PerceiverKind,
    pub params: usize,
    pub output_tokens: usize,
    pub final_loss: f64,
    #[serde(flatten)]
    pub metrics: TextScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: EvalTask,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Markdown comparison table, metrics ×100.
    pub fn table(&self) -> String {
        let mut s = String::from("| perceiver | params | tokens | BLEU-1 | ROUGE-1 | METEOR (exact) | token-F1 |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.kind,
                r.params,
                r.output_tokens,
                100.0 * r.metrics.bleu1,
                100.0 * r.metrics.rouge1,
                100.0 * r.metrics.meteor_exact,
                100.0 * r.metrics.token_f1
            ));
        }
        s
    }
}

/// Runs both SFT stages from the same base checkpoint for each perceiver
/// kind and scores the test split on `task`.
pub fn ablate(
    cfg: &RunConfig,
    data: &Dataset,
    base: &Path,
    kinds: &[PerceiverKind],
    task: EvalTask,
    work_dir: &Path,
    on_progress: &mut dyn FnMut(PerceiverKind, &str),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let spec = PerceiverSpec { kind, ..cfg.perceiver.clone() };
        on_progress(kind, "stage 1");
        let s1 = sft(cfg, data, SftStage::One, base, Some(&spec), &mut |_| {})?;
        let s1_path = work_dir.join(format!("{kind}_stage1.vckp"));
        write_checkpoint(&s1.checkpoint, &s1_path)?;
        on_progress(kind, "stage 2");
        let s2 = sft(cfg, data, SftStage::Two, &s1_path, None, &mut |_| {})?;
        let s2_path = work_dir.join(format!("{kind}_stage2.vckp"));
        write_checkpoint(&s2.checkpoint, &s2_path)?;
        on_progress(kind, "eval");
        let (vlm, store) = Vlm::from_checkpoint(cfg, &s2.checkpoint)?;
        let report = evaluate(cfg, &vlm, &store, data, task)?;
        rows.push(AblationRow {
            kind,
            params: spec.param_count(cfg.vit.embed_dim, &cfg.vit.grid()?)?,
            output_tokens: vlm.perceiver.n_out(),
            final_loss: s2.log.last().map_or(f64::NAN, |l| l.loss),
            metrics: report.metrics.text,
        });
    }
    Ok(AblationReport { task, config_hash: cfg.hash(), seed: cfg.train.seed, rows })
}

// ---------------------------------------------------------------------------
// Shape audit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeLedger {
    pub input_dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub grid: [usize; 3],
    pub input_tokens: usize,
    pub embed_dim: usize,
    pub perceiver: PerceiverKind,
    pub k: usize,
    pub output_grid: [usize; 3],
    pub output_tokens: usize,
    pub out_channels: usize,
    pub perceiver_params: usize,
    pub prefix_len: usize,
    pub max_text_tokens: usize,
}

/// Weights-free token accounting for a config.
pub fn shape_ledger(cfg: &RunConfig) -> Result<ShapeLedger> {
    cfg.validate()?;
    let grid = cfg.vit.grid()?;
    let out = cfg.perceiver.output_grid(&grid)?;
    Ok(ShapeLedger {
        input_dims: cfg.vit.input_dims,
        patch_size: cfg.vit.patch_size,
        grid: grid.dims,
        input_tokens: grid.n_tokens(),
        embed_dim: cfg.vit.embed_dim,
        perceiver: cfg.perceiver.kind,
        k: cfg.perceiver.k,
        output_grid: out.dims,
        output_tokens: out.n_tokens(),
        out_channels: cfg.perceiver.out_channels,
        perceiver_params: cfg.perceiver.param_count(cfg.vit.embed_dim, &grid)?,
        prefix_len: out.n_tokens(),
        max_text_tokens: cfg.lm.model.max_seq_len - out.n_tokens(),
    })
}
