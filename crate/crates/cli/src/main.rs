//! `vl3d`: data generation, training, generation and evaluation for the
//! 3D vision-language pipeline.

mod log;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vl3d::config::RunConfig;
use vl3d::perceiver::PerceiverKind;
use vl3d::phantom::{gen_dataset, PhantomOptions};
use vl3d::pipeline::{
    ablate, evaluate, generate, load_model, pretrain_lm, pretrain_mae, sft, shape_ledger, Dataset, EvalTask, SftStage,
    TrainLog,
};
use vl3d::tensor::write_checkpoint;
use vl3d::{Error, Result};

use crate::log::Log;

#[derive(Parser)]
#[command(name = "vl3d", version, about = "3D CT vision-language pipeline on synthetic phantoms")]
struct Cli {
    /// Worker threads; `1` gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config; overrides --preset.
    #[arg(long, env = "VL3D_CONFIG")]
    config: Option<PathBuf>,

    /// Built-in preset: toy or paper-scale.
    #[arg(long, default_value = "toy")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => RunConfig::preset(&self.preset),
        }
    }
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "VL3D_OUT")]
    out: PathBuf,

    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Number of volumes (default: config).
        #[arg(long)]
        n: Option<usize>,
        /// Master seed (default: config).
        #[arg(long)]
        seed: Option<u64>,
        /// Volume dims as X,Y,Z (default: config).
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
    },
    /// Print the token ledger of a config; needs no weights.
    Shapes {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Print the resolved config as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Masked-autoencoder pretraining of the 3D encoder.
    PretrainMae {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "VL3D_DATA")]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Text-only language-model pretraining (builds the base checkpoint).
    PretrainLm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "VL3D_DATA")]
        data: PathBuf,
        /// MAE checkpoint.
        #[arg(long, env = "VL3D_CKPT")]
        ckpt: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Supervised fine-tuning: stage 1 trains the perceiver, stage 2 adds LoRA.
    Sft {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "VL3D_DATA")]
        data: PathBuf,
        /// Base checkpoint (stage 1) or stage-1 checkpoint (stage 2).
        #[arg(long, env = "VL3D_CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        /// Perceiver kind for stage 1 (default: config).
        #[arg(long)]
        perceiver: Option<PerceiverKind>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Answer one question about one volume.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "VL3D_CKPT")]
        ckpt: PathBuf,
        /// RVOL file.
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "VL3D_DATA")]
        data: PathBuf,
        #[arg(long, env = "VL3D_CKPT")]
        ckpt: PathBuf,
        /// report, vqa or diagnosis.
        #[arg(long)]
        task: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train and score every perceiver kind from one base checkpoint.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "VL3D_DATA")]
        data: PathBuf,
        /// Base checkpoint.
        #[arg(long, env = "VL3D_CKPT")]
        ckpt: PathBuf,
        #[arg(long, default_value = "report")]
        task: String,
        /// Comma-separated kinds (default: all six).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<PerceiverKind>,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|v| format!("expected X,Y,Z, got {} values", v.len()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Checkpoint(_) => 4,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Shape { .. } => 3,
    }
}

/// Fails unless `path` is absent or `force` is set.
fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn out_dir(o: &OutArgs) -> Result<&Path> {
    std::fs::create_dir_all(&o.out).map_err(|e| Error::Data(format!("cannot create {}: {e}", o.out.display())))?;
    Ok(&o.out)
}

fn open_data(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Data(format!("{} is not a dataset directory (no manifest.json)", dir.display())));
    }
    Dataset::open(dir)
}

fn need_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn step_logger<'a>(log: &'a mut Log, stage: &'a str) -> impl FnMut(&TrainLog) + 'a {
    move |l: &TrainLog| log.step(stage, l)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { cfg, out, n, seed, dims } => {
            let cfg = cfg.load()?;
            let n = n.unwrap_or(cfg.data.volumes);
            if n < 2 {
                return Err(Error::Config(format!("--n must be at least 2 (a train and a test patient), got {n}")));
            }
            let dims = dims.unwrap_or(cfg.data.dims);
            if dims.iter().any(|&d| d == 0) {
                return Err(Error::Config(format!("--dims must be positive, got {dims:?}")));
            }
            let seed = seed.unwrap_or(cfg.data.seed);
            let dir = out_dir(&out)?;
            claim(&dir.join("manifest.json"), out.force)?;
            let mut log = Log::create(&cfg, "gen-data", Some(dir))?;
            let opts = PhantomOptions { dims, spacing: cfg.data.spacing, ..PhantomOptions::default() };
            let m = gen_dataset(dir, n, seed, &opts, cfg.data.test_fraction)?;
            log.event("done", json!({ "seed": m.seed, "counts": m.counts }));
            println!("{}", serde_json::to_string(&m).expect("manifest serializes"));
        }
        Cmd::Shapes { cfg, json } => {
            let cfg = cfg.load()?;
            let l = shape_ledger(&cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&l).expect("ledger serializes"));
            } else {
                let x = |d: [usize; 3]| format!("{}x{}x{}", d[0], d[1], d[2]);
                println!("input dims      {}", x(l.input_dims));
                println!("patch size      {}", x(l.patch_size));
                println!("token grid      {}", x(l.grid));
                println!("tokens          {} -> {}", l.input_tokens, l.output_tokens);
                println!("perceiver       {} k={} ({} params)", l.perceiver, l.k, l.perceiver_params);
                println!("output grid     {}", x(l.output_grid));
                println!("token width     {} -> {}", l.embed_dim, l.out_channels);
                println!("lm prefix       {} tokens (+{} text)", l.prefix_len, l.max_text_tokens);
            }
        }
        Cmd::Config { cfg } => print!("{}", cfg.load()?.to_toml()),
        Cmd::PretrainMae { cfg, data, out } => {
            let cfg = cfg.load()?;
            let data = open_data(&data)?;
            let dir = out_dir(&out)?;
            let path = dir.join("mae.vckp");
            claim(&path, out.force)?;
            let mut log = Log::create(&cfg, "pretrain-mae", Some(dir))?;
            let steps = pretrain_mae(&cfg, &data, &path, &mut step_logger(&mut log, "mae"))?;
            log.finish(&path, &steps);
        }
        Cmd::PretrainLm { cfg, data, ckpt, out } => {
            let cfg = cfg.load()?;
            let data = open_data(&data)?;
            need_file(&ckpt, "MAE checkpoint")?;
            let dir = out_dir(&out)?;
            let path = dir.join("base.vckp");
            claim(&path, out.force)?;
            let mut log = Log::create(&cfg, "pretrain-lm", Some(dir))?;
            let steps = pretrain_lm(&cfg, &data, &ckpt, &path, &mut step_logger(&mut log, "lm"))?;
            log.finish(&path, &steps);
        }
        Cmd::Sft { cfg, data, ckpt, stage, perceiver, out } => {
            let cfg = cfg.load()?;
            let stage = SftStage::from_number(stage)?;
            if perceiver.is_some() && stage == SftStage::Two {
                return Err(Error::Config("--perceiver applies to stage 1; stage 2 inherits it".into()));
            }
            let spec = perceiver.map(|kind| vl3d::perceiver::PerceiverSpec { kind, ..cfg.perceiver.clone() });
            let data = open_data(&data)?;
            need_file(&ckpt, "input checkpoint")?;
            let dir = out_dir(&out)?;
            let path = dir.join(format!("stage{}.vckp", stage.number()));
            claim(&path, out.force)?;
            let name = format!("sft{}", stage.number());
            let mut log = Log::create(&cfg, &format!("sft-stage{}", stage.number()), Some(dir))?;
            let res = sft(&cfg, &data, stage, &ckpt, spec.as_ref(), &mut step_logger(&mut log, &name))?;
            for (id, e) in &res.skipped {
                log.event("skipped", json!({ "volume": id, "error": e.to_string() }));
            }
            write_checkpoint(&res.checkpoint, &path)?;
            log.finish(&path, &res.log);
        }
        Cmd::Generate { cfg, ckpt, volume, prompt, max_new_tokens } => {
            let mut cfg = cfg.load()?;
            if let Some(m) = max_new_tokens {
                cfg.train.max_new_tokens = m;
            }
            need_file(&ckpt, "checkpoint")?;
            let (vlm, store) = load_model(&cfg, &ckpt)?;
            println!("{}", generate(&cfg, &vlm, &store, &volume, &prompt)?);
        }
        Cmd::Eval { cfg, data, ckpt, task, out } => {
            let cfg = cfg.load()?;
            let task = EvalTask::parse(&task)?;
            let data = open_data(&data)?;
            need_file(&ckpt, "checkpoint")?;
            let dir = out_dir(&out)?;
            let path = dir.join("report.json");
            claim(&path, out.force)?;
            let mut log = Log::create(&cfg, "eval", Some(dir))?;
            let (vlm, store) = load_model(&cfg, &ckpt)?;
            let report = evaluate(&cfg, &vlm, &store, &data, task)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&path, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            log.event("done", json!({ "n": report.n, "metrics": report.metrics, "artifact": path }));
            println!("{}", serde_json::to_string(&report.metrics).expect("metrics serialize"));
        }
        Cmd::Ablate { cfg, data, ckpt, task, kinds, out } => {
            let cfg = cfg.load()?;
            let task = EvalTask::parse(&task)?;
            let kinds = if kinds.is_empty() { PerceiverKind::ALL.to_vec() } else { kinds };
            let data = open_data(&data)?;
            need_file(&ckpt, "base checkpoint")?;
            let dir = out_dir(&out)?;
            let (jpath, mpath) = (dir.join("ablation.json"), dir.join("ablation.md"));
            claim(&jpath, out.force)?;
            let mut log = Log::create(&cfg, "ablate", Some(dir))?;
            let report = ablate(&cfg, &data, &ckpt, &kinds, task, dir, &mut |kind, phase| {
                log.event("progress", json!({ "perceiver": kind, "phase": phase }))
            })?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&jpath, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", jpath.display())))?;
            std::fs::write(&mpath, report.table()).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
            log.event("done", json!({ "artifact": jpath, "kinds": kinds.len() }));
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool is configured once");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "event": "error", "code": exit_code(&e), "message": e.to_string() }));
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
