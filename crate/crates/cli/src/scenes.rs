//! `scene-gen`, `make-dataset` and `render`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use voldiff_core::dataset::{make_dataset, DatasetConfig, CAMERA_FOV_DEG, CAMERA_RADIUS};
use voldiff_core::encoder::load_checkpoint;
use voldiff_core::geometry::{CameraPose, Intrinsics, Vec3};
use voldiff_core::renderer::{render_image, FieldDecoder, RenderConfig, Rendered};
use voldiff_core::scene::{render_analytic, scene_gen, SceneSpec};
use voldiff_core::volume::FeatureVolume;

use crate::config::{resolve, Common};
use crate::run::RunDir;

pub const SCENES_FILE: &str = "scenes.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub caption: String,
    #[serde(flatten)]
    pub scene: SceneSpec,
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries: Vec<SceneEntry> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if entries.is_empty() {
        bail!("{} lists no scenes", path.display());
    }
    entries.into_iter().map(|e| e.scene.validate().map(|_| e.scene).map_err(Into::into)).collect()
}

/// Scenes from a `scenes.json` file, or freshly generated.
pub fn scenes_or_generate(file: &Option<PathBuf>, seed: u64, count: usize, complexity: usize) -> Result<Vec<SceneSpec>> {
    match file {
        Some(p) => read_scenes(p),
        None => Ok(scene_gen(seed, count, complexity)?),
    }
}

// scene-gen

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGenConfig {
    pub seed: u64,
    pub count: usize,
    /// Primitives per scene.
    pub complexity: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig { seed: 0, count: 4, complexity: 2 }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SceneGenArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    complexity: Option<usize>,
}

pub fn scene_gen_cmd(common: &Common, args: &SceneGenArgs) -> Result<()> {
    let r = resolve::<SceneGenConfig>(common, args)?;
    let c = &r.config;
    let scenes = scene_gen(c.seed, c.count, c.complexity)?;
    let run = RunDir::create("scene-gen", common.out.as_deref(), r.snapshot)?;
    let entries: Vec<SceneEntry> = scenes.into_iter().map(|s| SceneEntry { caption: s.caption(), scene: s }).collect();
    for e in &entries {
        println!("{}", e.caption);
    }
    run.write_json(SCENES_FILE, &entries)?;
    run.finish()?;
    Ok(())
}

// make-dataset

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakeDatasetConfig {
    pub seed: u64,
    /// `scenes.json` from `scene-gen`; generated from `count`/`complexity`
    /// when absent.
    pub scenes: Option<PathBuf>,
    pub count: usize,
    pub complexity: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub jitter: bool,
}

impl Default for MakeDatasetConfig {
    fn default() -> Self {
        MakeDatasetConfig { seed: 0, scenes: None, count: 4, complexity: 2, views: 40, width: 64, height: 64, samples_per_ray: 64, jitter: false }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    complexity: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long)]
    jitter: Option<bool>,
}

pub const DATASET_DIR: &str = "dataset";

pub fn make_dataset_cmd(common: &Common, args: &MakeDatasetArgs) -> Result<()> {
    let r = resolve::<MakeDatasetConfig>(common, args)?;
    let c = &r.config;
    let scenes = scenes_or_generate(&c.scenes, c.seed, c.count, c.complexity)?;
    let run = RunDir::create("make-dataset", common.out.as_deref(), r.snapshot.clone())?;
    let cfg = DatasetConfig {
        views_per_scene: c.views,
        width: c.width,
        height: c.height,
        seed: c.seed,
        render: RenderConfig { samples_per_ray: c.samples_per_ray, jitter: c.jitter, seed: c.seed, ..Default::default() },
    };
    let dirs = make_dataset(&scenes, &cfg, &run.path(DATASET_DIR)?)?;
    eprintln!("rendered {} scenes x {} views", dirs.len(), c.views);
    run.finish()?;
    Ok(())
}

// render

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderCmdConfig {
    pub seed: u64,
    /// VOLB feature volume to render.
    pub volume: Option<PathBuf>,
    /// Encoder checkpoint whose MLP decodes `volume`; the parameter-free
    /// baked-volume decoder is used when absent.
    pub checkpoint: Option<PathBuf>,
    /// `scenes.json` for an analytic render instead of a volume.
    pub scenes: Option<PathBuf>,
    pub scene_index: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub jitter: bool,
    pub background: [f32; 3],
}

impl Default for RenderCmdConfig {
    fn default() -> Self {
        RenderCmdConfig {
            seed: 0,
            volume: None,
            checkpoint: None,
            scenes: None,
            scene_index: 0,
            azimuth_deg: 30.0,
            elevation_deg: 20.0,
            radius: CAMERA_RADIUS,
            fov_deg: CAMERA_FOV_DEG,
            width: 128,
            height: 128,
            samples_per_ray: 64,
            jitter: false,
            background: [1.0; 3],
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    scene_index: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    azimuth_deg: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    elevation_deg: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    fov_deg: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long)]
    jitter: Option<bool>,
}

/// Camera on a sphere around the origin, `+y` up.
pub fn orbit_camera(c: &RenderCmdConfig) -> Result<(CameraPose, Intrinsics)> {
    let (az, el) = (c.azimuth_deg.to_radians(), c.elevation_deg.to_radians());
    let eye = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * c.radius;
    let pose = CameraPose::look_at(eye, Vec3::zeros(), Vec3::y())?;
    Ok((pose, Intrinsics::new(c.fov_deg, c.width, c.height)?))
}

pub fn write_render(run: &RunDir, out: &Rendered) -> Result<()> {
    out.rgb.save(run.path("render.rgb.imgf")?)?;
    out.depth.save(run.path("render.depth.imgf")?)?;
    out.opacity.save(run.path("render.opacity.imgf")?)?;
    out.rgb.save_png(run.path("render.png")?, 1.0)?;
    Ok(())
}

pub fn render_cmd(common: &Common, args: &RenderArgs) -> Result<()> {
    let r = resolve::<RenderCmdConfig>(common, args)?;
    let c = &r.config;
    let (pose, k) = orbit_camera(c)?;
    let rcfg = RenderConfig { samples_per_ray: c.samples_per_ray, background: c.background, jitter: c.jitter, seed: c.seed };
    let out = match (&c.volume, &c.scenes) {
        (Some(v), None) => {
            let vol = FeatureVolume::load(v)?;
            match &c.checkpoint {
                Some(ck) => {
                    let (_, dec) = load_checkpoint(ck, vol.n(), vol.c()).with_context(|| format!("loading checkpoint {}", ck.display()))?;
                    render_image(&vol, &dec, &pose, &k, &rcfg)?
                }
                None => render_image(&vol, &FieldDecoder::new(), &pose, &k, &rcfg)?,
            }
        }
        (None, Some(s)) => {
            let scenes = read_scenes(s)?;
            let scene = scenes.get(c.scene_index).with_context(|| format!("scene_index {} outside 0..{}", c.scene_index, scenes.len()))?;
            render_analytic(scene, &pose, &k, &rcfg)?
        }
        (None, None) => bail!("missing required key `volume` (or `scenes` for an analytic render)"),
        (Some(_), Some(_)) => bail!("set only one of `volume` and `scenes`"),
    };
    let run = RunDir::create("render", common.out.as_deref(), r.snapshot.clone())?;
    write_render(&run, &out)?;
    run.finish()?;
    Ok(())
}
