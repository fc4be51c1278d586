//! `train-diffusion` and `sample`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use voldiff_core::diffusion::{
    build_schedule, ddpm_sample, nearest_volume, train_diffusion, Denoiser, DenoiserConfig, DiffusionTrainConfig, Prediction,
    SampleConfig, ScheduleKind, ScheduleSpec, TrainItem,
};
use voldiff_core::scene::bake_volume;
use voldiff_core::text::Condition;
use voldiff_core::volume::FeatureVolume;

use crate::config::{required, resolve, Common};
use crate::run::RunDir;
use crate::scenes::scenes_or_generate;

pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "denoiser.vdcp";

/// Everything `sample` needs besides the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub alpha: f64,
    pub prediction: Prediction,
    /// Training volumes, for nearest-neighbour reports.
    pub train: Vec<TrainEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub caption: String,
    pub volume: String,
}

// train-diffusion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainDiffusionCmdConfig {
    pub seed: u64,
    /// `scenes.json` to bake; generated from `count`/`complexity` when absent.
    pub scenes: Option<PathBuf>,
    pub count: usize,
    pub complexity: usize,
    pub n: usize,
    pub channels: usize,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub alpha: f64,
    pub prediction: Prediction,
    pub p_uncond: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub width1: usize,
    pub width2: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub log_every: usize,
}

impl Default for TrainDiffusionCmdConfig {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        TrainDiffusionCmdConfig {
            seed: d.seed,
            scenes: None,
            count: 2,
            complexity: 2,
            n: d.denoiser.n,
            channels: d.denoiser.channels,
            schedule: d.schedule.kind,
            timesteps: d.schedule.steps,
            beta_start: d.schedule.beta_start,
            beta_end: d.schedule.beta_end,
            alpha: d.alpha,
            prediction: d.prediction,
            p_uncond: d.p_uncond,
            lr: d.lr,
            weight_decay: d.weight_decay,
            steps: d.steps,
            batch_size: d.batch_size,
            width1: d.denoiser.width1,
            width2: d.denoiser.width2,
            attn_dim: d.denoiser.attn_dim,
            time_dim: d.denoiser.time_dim,
            log_every: 100,
        }
    }
}

impl TrainDiffusionCmdConfig {
    fn core(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            schedule: ScheduleSpec {
                kind: self.schedule,
                steps: self.timesteps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
                ..ScheduleSpec::default()
            },
            denoiser: DenoiserConfig {
                n: self.n,
                channels: self.channels,
                width1: self.width1,
                width2: self.width2,
                attn_dim: self.attn_dim,
                time_dim: self.time_dim,
            },
            alpha: self.alpha,
            prediction: self.prediction,
            p_uncond: self.p_uncond,
            lr: self.lr,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainDiffusionArgs {
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    complexity: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    prediction: Option<String>,
    #[arg(long)]
    p_uncond: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Serialize)]
struct LossLog {
    step: usize,
    loss: f64,
}

pub fn train_diffusion_cmd(common: &Common, args: &TrainDiffusionArgs) -> Result<()> {
    let r = resolve::<TrainDiffusionCmdConfig>(common, args)?;
    let c = &r.config;
    let cfg = c.core();
    cfg.validate()?;
    let scenes = scenes_or_generate(&c.scenes, c.seed, c.count, c.complexity)?;
    let items: Vec<TrainItem> = scenes
        .iter()
        .map(|s| Ok(TrainItem { volume: bake_volume(s, c.n, c.channels)?, caption: s.caption() }))
        .collect::<Result<_>>()?;
    let mut run = RunDir::create("train-diffusion", common.out.as_deref(), r.snapshot.clone())?;
    let mut train = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let name = format!("train/volume_{i:04}.volb");
        it.volume.save(run.path(&name)?)?;
        train.push(TrainEntry { caption: it.caption.clone(), volume: name });
    }
    let mut log_err = Ok(());
    let (trainer, _) = train_diffusion(&items, &cfg, |step, loss| {
        if c.log_every > 0 && (step + 1) % c.log_every == 0 {
            eprintln!("step {:>6}  loss {loss:.6}", step + 1);
        }
        if log_err.is_ok() {
            log_err = run.log(&LossLog { step, loss });
        }
    })?;
    log_err?;
    trainer.denoiser.save(run.path(CHECKPOINT_FILE)?)?;
    let card = ModelCard { denoiser: cfg.denoiser.clone(), schedule: cfg.schedule.clone(), alpha: cfg.alpha, prediction: cfg.prediction, train };
    run.write_json(MODEL_FILE, &card)?;
    run.finish()?;
    Ok(())
}

// sample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCmdConfig {
    pub seed: u64,
    /// `denoiser.vdcp` from `train-diffusion`; `model.json` is read from the
    /// same directory.
    pub checkpoint: Option<PathBuf>,
    pub caption: String,
    /// Volumes drawn with seeds `seed, seed + 1, ...`.
    pub count: usize,
    pub guidance_scale: f64,
    /// Noise mix; the training value when absent.
    pub alpha: Option<f64>,
}

impl Default for SampleCmdConfig {
    fn default() -> Self {
        SampleCmdConfig { seed: 0, checkpoint: None, caption: String::new(), count: 1, guidance_scale: 1.0, alpha: None }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    caption: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    volume: String,
    seed: u64,
    caption: &'a str,
    schedule_hash: &'a str,
    alpha: f64,
    guidance_scale: f64,
    prediction: Prediction,
    n: usize,
    channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    nearest_train: Option<Nearest<'a>>,
}

#[derive(Serialize)]
struct Nearest<'a> {
    index: usize,
    caption: &'a str,
    rmse: f64,
}

pub fn read_model(checkpoint: &Path) -> Result<ModelCard> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sample_cmd(common: &Common, args: &SampleArgs) -> Result<()> {
    let r = resolve::<SampleCmdConfig>(common, args)?;
    let c = &r.config;
    let ckpt = required(&c.checkpoint, "checkpoint")?;
    if c.count == 0 {
        bail!("count must be at least 1");
    }
    let card = read_model(ckpt)?;
    let den = Denoiser::load(ckpt, &card.denoiser).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let schedule = build_schedule(&card.schedule)?;
    let hash = schedule.fingerprint();
    let scfg = SampleConfig { alpha: c.alpha.unwrap_or(card.alpha), guidance_scale: c.guidance_scale, prediction: card.prediction };
    let base = ckpt.parent().unwrap_or(Path::new("."));
    let refs: Vec<FeatureVolume> = card.train.iter().map(|t| FeatureVolume::load(base.join(&t.volume))).collect::<Result<_, _>>()?;
    let cond = Condition::from_caption(&c.caption);
    let seeds: Vec<u64> = (0..c.count as u64).map(|i| c.seed.wrapping_add(i)).collect();
    let conds = vec![&cond; seeds.len()];
    let (ch, n) = (card.denoiser.channels, card.denoiser.n);
    let vols = ddpm_sample(&den, &den.params, &schedule, (ch, n), &conds, &seeds, &scfg)?;
    let run = RunDir::create("sample", common.out.as_deref(), r.snapshot.clone())?;
    for (i, (v, &seed)) in vols.iter().zip(&seeds).enumerate() {
        let name = format!("sample_{i:03}.volb");
        v.save(run.path(&name)?)?;
        let nearest_train = if refs.is_empty() {
            None
        } else {
            let k = nearest_volume(v, &refs)?;
            Some(Nearest { index: k, caption: &card.train[k].caption, rmse: v.mse(&refs[k])?.sqrt() })
        };
        if let Some(nn) = &nearest_train {
            eprintln!("sample {i} (seed {seed}): nearest training volume {} \"{}\", rmse {:.4}", nn.index, nn.caption, nn.rmse);
        }
        let rec = SampleRecord {
            volume: name,
            seed,
            caption: &c.caption,
            schedule_hash: &hash,
            alpha: scfg.alpha,
            guidance_scale: scfg.guidance_scale,
            prediction: scfg.prediction,
            n,
            channels: ch,
            nearest_train,
        };
        run.write_json(&format!("sample_{i:03}.json"), &rec)?;
    }
    run.finish()?;
    Ok(())
}
