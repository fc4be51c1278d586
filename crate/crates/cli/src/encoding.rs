//! `encode` and `train-encoder`.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use voldiff_core::dataset::{list_scene_dirs, load_scene_dir, MultiViewSet};
use voldiff_core::encoder::{checkpoint_file, heldout_psnr, load_checkpoint, train_encoder, EncoderTrainConfig, TrainScene, WeightForm};

use crate::config::{required, resolve, Common};
use crate::run::RunDir;

/// Scene sets of a dataset directory, with their captions.
pub fn load_dataset(root: &std::path::Path, limit: Option<usize>) -> Result<Vec<(String, MultiViewSet)>> {
    let mut dirs = list_scene_dirs(root)?;
    if let Some(k) = limit {
        if k == 0 || k > dirs.len() {
            bail!("scenes = {k} outside 1..={}", dirs.len());
        }
        dirs.truncate(k);
    }
    dirs.iter().map(|d| load_scene_dir(d).map(|(f, s)| (f.caption, s)).map_err(Into::into)).collect()
}

// encode

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    /// `encoder.vdcp` from `train-encoder`.
    pub checkpoint: Option<PathBuf>,
    /// Dataset root from `make-dataset`.
    pub dataset: Option<PathBuf>,
    pub n: usize,
    pub channels: usize,
    /// Encode from the first `input_views` views; all views when absent.
    pub input_views: Option<usize>,
    /// Skip the refinement network and write the fused coarse volume.
    pub coarse: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig { checkpoint: None, dataset: None, n: 32, channels: 4, input_views: None, coarse: false }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    input_views: Option<usize>,
    #[arg(long)]
    coarse: Option<bool>,
}

#[derive(Serialize)]
struct EncodedEntry {
    scene: usize,
    caption: String,
    volume: String,
}

pub fn encode_cmd(common: &Common, args: &EncodeArgs) -> Result<()> {
    let r = resolve::<EncodeConfig>(common, args)?;
    let c = &r.config;
    let ckpt = required(&c.checkpoint, "checkpoint")?;
    let data = load_dataset(required(&c.dataset, "dataset")?, None)?;
    let (enc, _) = load_checkpoint(ckpt, c.n, c.channels).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let run = RunDir::create("encode", common.out.as_deref(), r.snapshot.clone())?;
    let mut index = Vec::with_capacity(data.len());
    for (i, (caption, set)) in data.iter().enumerate() {
        let set = match c.input_views {
            Some(k) if k == 0 || k > set.len() => bail!("input_views = {k} outside 1..={}", set.len()),
            Some(k) => set.subset(&(0..k).collect::<Vec<_>>()),
            None => set.clone(),
        };
        let start = std::time::Instant::now();
        let vol = enc.encode_with(&set, !c.coarse)?;
        eprintln!("scene {i}: encoded {} views in {:.3} s", set.len(), start.elapsed().as_secs_f64());
        let name = format!("volumes/scene_{i:04}.volb");
        vol.save(run.path(&name)?)?;
        index.push(EncodedEntry { scene: i, caption: caption.clone(), volume: name });
    }
    run.write_json("volumes.json", &index)?;
    run.finish()?;
    Ok(())
}

// train-encoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainEncoderCmdConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Use only the first `scenes` scenes.
    pub scenes: Option<usize>,
    pub n: usize,
    pub channels: usize,
    pub input_views: usize,
    pub supervision_views: usize,
    pub pixels_per_view: usize,
    pub samples_per_ray: usize,
    pub steps: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lambda: Option<f64>,
    pub weight_form: WeightForm,
    pub eval_every: usize,
    pub eval_pixels: usize,
    pub early_stop_ratio: Option<f64>,
    pub checkpoint_every: usize,
    /// Input view counts for the final held-out PSNR table.
    pub psnr_views: Vec<usize>,
    pub psnr_samples: usize,
}

impl Default for TrainEncoderCmdConfig {
    fn default() -> Self {
        let d = EncoderTrainConfig::default();
        TrainEncoderCmdConfig {
            seed: d.seed,
            dataset: None,
            scenes: None,
            n: d.n,
            channels: d.channels,
            input_views: d.input_views,
            supervision_views: d.supervision_views,
            pixels_per_view: d.pixels_per_view,
            samples_per_ray: d.samples_per_ray,
            steps: d.steps,
            lr_encoder: d.lr_encoder,
            lr_decoder: d.lr_decoder,
            lambda: d.lambda,
            weight_form: d.weight_form,
            eval_every: d.eval_every,
            eval_pixels: d.eval_pixels,
            early_stop_ratio: d.early_stop_ratio,
            checkpoint_every: d.checkpoint_every,
            psnr_views: Vec::new(),
            psnr_samples: 64,
        }
    }
}

impl TrainEncoderCmdConfig {
    fn core(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            n: self.n,
            channels: self.channels,
            input_views: self.input_views,
            supervision_views: self.supervision_views,
            pixels_per_view: self.pixels_per_view,
            samples_per_ray: self.samples_per_ray,
            steps: self.steps,
            lr_encoder: self.lr_encoder,
            lr_decoder: self.lr_decoder,
            lambda: self.lambda,
            weight_form: self.weight_form,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_pixels: self.eval_pixels,
            early_stop_ratio: self.early_stop_ratio,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    input_views: Option<usize>,
    #[arg(long)]
    supervision_views: Option<usize>,
    #[arg(long)]
    pixels_per_view: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_decoder: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    weight_form: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_pixels: Option<usize>,
    #[arg(long)]
    early_stop_ratio: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    psnr_views: Option<Vec<usize>>,
    #[arg(long)]
    psnr_samples: Option<usize>,
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: usize,
    initial_heldout: f64,
    final_heldout: f64,
    ratio: f64,
    psnr: Vec<PsnrRow>,
}

#[derive(Serialize)]
struct PsnrRow {
    input_views: usize,
    psnr: f64,
}

pub fn train_encoder_cmd(common: &Common, args: &TrainEncoderArgs) -> Result<()> {
    let r = resolve::<TrainEncoderCmdConfig>(common, args)?;
    let c = &r.config;
    let cfg = c.core();
    cfg.validate()?;
    let data = load_dataset(required(&c.dataset, "dataset")?, c.scenes)?;
    let sets: Vec<MultiViewSet> = data.into_iter().map(|(_, s)| s).collect();
    let mut run = RunDir::create("train-encoder", common.out.as_deref(), r.snapshot.clone())?;
    let ckpt = checkpoint_file(&run.dir);
    let mut log_err = Ok(());
    let out = train_encoder(&sets, &cfg, Some(&ckpt), |entry| {
        if let Some(h) = entry.heldout_loss {
            eprintln!("step {:>6}  loss {:.6}  heldout {:.6}", entry.step, entry.loss, h);
        }
        if log_err.is_ok() {
            log_err = run.log(entry);
        }
    })?;
    log_err?;
    let scenes: Vec<TrainScene> = sets.iter().map(|s| TrainScene::split(s, cfg.input_views)).collect::<Result<_, _>>()?;
    let mut psnr = Vec::with_capacity(c.psnr_views.len());
    for &k in &c.psnr_views {
        let p = heldout_psnr(&out.encoder, &out.decoder, &scenes, k, c.psnr_samples)?;
        eprintln!("held-out PSNR with {k} input views: {p:.3} dB");
        psnr.push(PsnrRow { input_views: k, psnr: p });
    }
    let summary = TrainSummary {
        steps_run: out.steps_run,
        initial_heldout: out.initial_heldout,
        final_heldout: out.final_heldout,
        ratio: out.final_heldout / out.initial_heldout,
        psnr,
    };
    run.write_json("summary.json", &summary)?;
    run.finish()?;
    Ok(())
}
