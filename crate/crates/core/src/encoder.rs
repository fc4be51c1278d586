//! Feed-forward volume encoder: per-view 2D features, depth-weighted
//! unprojection into a coarse grid, a small 3D U-Net refinement and
//! end-to-end training through the differentiable renderer.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voldiff_autodiff::ops::sample::gather_forward;
use voldiff_autodiff::{
    adam_step_store, checkpoint, AdamConfig, AdamState, Bound, ConvSpec, Element, GatherPlan, ParamStore, Tape, Tensor, Var,
};

use crate::dataset::{MultiViewSet, View};
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{camera_distance, project_point, ray_for_pixel, Ray, Vec3};
use crate::nn::{derive_seed, seeded, Conv, GroupNorm, UpConv};
use crate::raster::psnr;
use crate::renderer::{render_image, render_ray_field, render_rays_var, Decoder, DecoderMlp, NeuralField, RenderConfig};
use crate::volume::{voxel_center, FeatureVolume};

pub const EXTRACT_HIDDEN: usize = 16;
pub const FUSE_EPS: f64 = 1e-8;
pub const GN_GROUPS: usize = 8;

/// `lambda = 160 n`.
pub fn default_lambda(n: usize) -> f64 {
    160.0 * n as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightForm {
    /// `exp(-lambda dd^2)`
    #[default]
    Squared,
    /// `exp(-lambda |dd|)`
    Linear,
}

impl WeightForm {
    pub fn weight(self, lambda: f64, dd: f64) -> f64 {
        match self {
            WeightForm::Squared => (-lambda * dd * dd).exp(),
            WeightForm::Linear => (-lambda * dd.abs()).exp(),
        }
    }
}

/// Row-major `[V, 3, H, W]` stack of the view images.
pub fn images_tensor(set: &MultiViewSet) -> Result<Tensor<f32>> {
    set.validate()?;
    let (w, h) = (set.views[0].intrinsics.width, set.views[0].intrinsics.height);
    let mut data = Vec::with_capacity(set.len() * 3 * w * h);
    for v in &set.views {
        let px = v.image.data();
        for ch in 0..3 {
            data.extend((0..w * h).map(|i| px[3 * i + ch]));
        }
    }
    Ok(Tensor::new([set.len(), 3, h, w], data)?)
}

/// Bilinear taps `(pixel index, weight)` at continuous image position
/// `(x, y)` (pixel centres at `+0.5`); `None` outside the image.
pub fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Option<Vec<(usize, f64)>> {
    if !(0.0..=w as f64).contains(&x) || !(0.0..=h as f64).contains(&y) {
        return None;
    }
    let axis = |c: f64, len: usize| {
        let c = (c - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, c - i0 as f64)
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    let taps = [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ];
    Some(taps.into_iter().filter(|&(_, wt)| wt > 0.0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnprojectConfig {
    pub lambda: f64,
    pub form: WeightForm,
}

impl UnprojectConfig {
    pub fn for_resolution(n: usize) -> Self {
        UnprojectConfig { lambda: default_lambda(n), form: WeightForm::Squared }
    }
}

/// Per-view evidence for one voxel: pixel taps and the depth difference.
#[derive(Clone, Debug)]
struct Hit {
    view: usize,
    taps: Vec<(usize, f64)>,
    dd: f64,
}

fn voxel_hits(set: &MultiViewSet, p: &Vec3) -> Vec<Hit> {
    let mut hits = Vec::new();
    for (vi, v) in set.views.iter().enumerate() {
        let k = &v.intrinsics;
        let Some((x, y)) = project_point(&v.pose, k, p).pixel() else { continue };
        let Some(taps) = bilinear_taps(x, y, k.width, k.height) else { continue };
        let depth = v.depth.data();
        // any background tap makes the sampled depth meaningless
        if taps.iter().any(|&(i, _)| depth[i] <= 0.0) {
            continue;
        }
        let d: f64 = taps.iter().map(|&(i, wt)| wt * depth[i] as f64).sum();
        hits.push(Hit { view: vi, taps, dd: d - camera_distance(&v.pose, p) });
    }
    hits
}

/// Gather plan lifting `[V, c, H, W]` feature maps to `[c, n^3]` voxel
/// features: each voxel is `sum_i w_i f_i / (sum_i w_i + eps)`.
pub fn unproject_plan(set: &MultiViewSet, n: usize, cfg: &UnprojectConfig) -> Result<Arc<GatherPlan>> {
    set.validate()?;
    if n == 0 {
        return Err(invalid("n", "must be positive"));
    }
    if !(cfg.lambda > 0.0) {
        return Err(invalid("lambda", format!("{} is not positive", cfg.lambda)));
    }
    let hw = set.views[0].intrinsics.pixel_count();
    let rows: Vec<Vec<(u32, f64)>> = (0..n * n * n)
        .into_par_iter()
        .map(|j| {
            let (x, y, z) = (j % n, (j / n) % n, j / (n * n));
            let p = Vec3::from(voxel_center(n, [x, y, z]));
            let hits = voxel_hits(set, &p);
            let ws: Vec<f64> = hits.iter().map(|h| cfg.form.weight(cfg.lambda, h.dd)).collect();
            let norm = ws.iter().sum::<f64>() + FUSE_EPS;
            let mut row = Vec::new();
            for (h, w) in hits.iter().zip(&ws) {
                if *w == 0.0 {
                    continue;
                }
                for &(pix, tw) in &h.taps {
                    row.push(((h.view * hw + pix) as u32, w * tw / norm));
                }
            }
            row
        })
        .collect();
    Ok(GatherPlan::from_rows(&rows, set.len() * hw))
}

/// Unprojects precomputed `[V, c, H, W]` feature maps without a tape.
pub fn unproject(features: &Tensor<f32>, set: &MultiViewSet, n: usize, cfg: &UnprojectConfig) -> Result<FeatureVolume> {
    let s = features.shape();
    let k = &set.views.first().ok_or(CoreError::Empty("no views to unproject"))?.intrinsics;
    if s.len() != 4 || s[0] != set.len() || s[2] != k.height || s[3] != k.width {
        return Err(invalid("features", format!("shape {s:?} does not match {} views of {}x{}", set.len(), k.width, k.height)));
    }
    let plan = unproject_plan(set, n, cfg)?;
    let out = gather_forward(features, &plan)?;
    FeatureVolume::new(n, s[1], out.into_data())
}

/// Two 5x5 same-padded convolutions, `3 -> 16 -> c`, ReLU between.
#[derive(Clone, Copy, Debug)]
pub struct FeatureExtractor {
    conv1: Conv,
    conv2: Conv,
    pub channels: usize,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        let same = ConvSpec::new(1, 2);
        FeatureExtractor {
            conv1: Conv::new(store, "extract.0", 3, EXTRACT_HIDDEN, 5, same, 2, rng),
            conv2: Conv::new(store, "extract.1", EXTRACT_HIDDEN, channels, 5, same, 2, rng),
            channels,
        }
    }

    /// `[V, 3, H, W] -> [V, c, H, W]`.
    pub fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, images: Var) -> Result<Var> {
        let s = t.value(images).shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(invalid("images", format!("expected [V, 3, H, W], got {s:?}")));
        }
        let h = self.conv1.forward(t, b, images)?;
        let h = t.relu(h)?;
        self.conv2.forward(t, b, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv,
    norm: GroupNorm,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Block {
            conv: Conv::new(store, &format!("{name}.conv"), ci, co, 3, ConvSpec::new(stride, 1), 3, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), co, GN_GROUPS),
        }
    }

    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.conv.forward(t, b, x)?;
        let h = self.norm.forward(t, b, h)?;
        Ok(t.relu(h)?)
    }
}

/// Toy 3D U-Net: `c -> 16` at full resolution, stride-2 stages to 32
/// channels at `n/2` and `n/4`, a bottleneck, transposed-conv upsampling
/// with additive skips, and a zero-initialised output conv added to the
/// input.
#[derive(Clone, Copy, Debug)]
pub struct RefineNet {
    stem: Block,
    down1: Block,
    down2: Block,
    mid: Block,
    up1: UpConv,
    fuse1: Block,
    up2: UpConv,
    fuse2: Block,
    out: Conv,
    pub channels: usize,
}

impl RefineNet {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        RefineNet {
            stem: Block::new(store, "refine.stem", channels, 16, 1, rng),
            down1: Block::new(store, "refine.down1", 16, 32, 2, rng),
            down2: Block::new(store, "refine.down2", 32, 32, 2, rng),
            mid: Block::new(store, "refine.mid", 32, 32, 1, rng),
            up1: UpConv::new(store, "refine.up1", 32, 32, rng),
            fuse1: Block::new(store, "refine.fuse1", 32, 32, 1, rng),
            up2: UpConv::new(store, "refine.up2", 32, 16, rng),
            fuse2: Block::new(store, "refine.fuse2", 16, 16, 1, rng),
            out: Conv::zeroed(store, "refine.out", 16, channels, 3, ConvSpec::new(1, 1), 3),
            channels,
        }
    }

    /// `[1, c, n, n, n]` in and out; `n` must be a multiple of 4.
    pub fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let s = t.value(x).shape();
        let ok = s.len() == 5 && s[0] == 1 && s[1] == self.channels && s[2] == s[3] && s[3] == s[4] && s[2].is_multiple_of(4) && s[2] > 0;
        if !ok {
            return Err(invalid("volume", format!("refinement expects [1, {}, n, n, n] with 4 | n, got {s:?}", self.channels)));
        }
        let h0 = self.stem.forward(t, b, x)?;
        let h1 = self.down1.forward(t, b, h0)?;
        let h2 = self.down2.forward(t, b, h1)?;
        let m = self.mid.forward(t, b, h2)?;
        let u1 = self.up1.forward(t, b, m)?;
        let u1 = t.add(u1, h1)?;
        let u1 = self.fuse1.forward(t, b, u1)?;
        let u2 = self.up2.forward(t, b, u1)?;
        let u2 = t.add(u2, h0)?;
        let u2 = self.fuse2.forward(t, b, u2)?;
        let r = self.out.forward(t, b, u2)?;
        Ok(t.add(x, r)?)
    }
}

/// Extractor and refinement network sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub params: ParamStore,
    pub extractor: FeatureExtractor,
    pub refine: RefineNet,
    pub n: usize,
    pub unproject: UnprojectConfig,
}

impl Encoder {
    pub fn new(n: usize, channels: usize, seed: u64) -> Result<Self> {
        if n < 4 || !n.is_multiple_of(4) {
            return Err(invalid("n", format!("{n} is not a positive multiple of 4")));
        }
        if channels == 0 {
            return Err(invalid("channels", "must be positive"));
        }
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let extractor = FeatureExtractor::new(&mut params, channels, &mut rng);
        let refine = RefineNet::new(&mut params, channels, &mut rng);
        Ok(Encoder { params, extractor, refine, n, unproject: UnprojectConfig::for_resolution(n) })
    }

    pub fn channels(&self) -> usize {
        self.extractor.channels
    }

    /// Coarse and refined volumes, both `[1, c, n, n, n]`.
    pub fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, set: &MultiViewSet) -> Result<(Var, Var)> {
        let plan = unproject_plan(set, self.n, &self.unproject)?;
        let images = t.constant(images_tensor(set)?.cast());
        let feats = self.extractor.forward(t, b, images)?;
        let flat = t.sparse_gather(feats, plan)?;
        let n = self.n;
        let coarse = t.reshape(flat, [1, self.channels(), n, n, n])?;
        let fine = self.refine.forward(t, b, coarse)?;
        Ok((coarse, fine))
    }

    /// Refined volume, or the coarse one when `refined` is false.
    pub fn encode_with(&self, set: &MultiViewSet, refined: bool) -> Result<FeatureVolume> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, false);
        let (coarse, fine) = self.forward(&mut t, &b, set)?;
        FeatureVolume::from_tensor(t.value(if refined { fine } else { coarse }))
    }

    pub fn encode(&self, set: &MultiViewSet) -> Result<FeatureVolume> {
        self.encode_with(set, true)
    }

    pub fn encode_timed(&self, set: &MultiViewSet) -> Result<(FeatureVolume, Duration)> {
        let start = Instant::now();
        let v = self.encode(set)?;
        Ok((v, start.elapsed()))
    }
}

/// Encoder and decoder parameters in one VDCP file, under `encoder.` and
/// `decoder.` prefixes.
pub fn save_checkpoint(path: impl AsRef<Path>, encoder: &Encoder, decoder: &DecoderMlp) -> Result<()> {
    let mut all = ParamStore::new();
    all.extend_prefixed("encoder.", &encoder.params);
    all.extend_prefixed("decoder.", decoder.params());
    Ok(checkpoint::save(path, &all)?)
}

/// Loads into freshly built models of the given shape.
pub fn load_checkpoint(path: impl AsRef<Path>, n: usize, channels: usize) -> Result<(Encoder, DecoderMlp)> {
    let all = checkpoint::load(path)?;
    let mut enc = Encoder::new(n, channels, 0)?;
    enc.params.load_from(&all.with_prefix("encoder."))?;
    let mut dec = DecoderMlp::new(channels, 0);
    dec.params_mut().load_from(&all.with_prefix("decoder."))?;
    Ok((enc, dec))
}

/// One training object: the first `input_views` views are encoder inputs
/// and supervision targets; the rest are held out.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub inputs: MultiViewSet,
    pub heldout: MultiViewSet,
}

impl TrainScene {
    pub fn split(set: &MultiViewSet, input_views: usize) -> Result<Self> {
        set.validate()?;
        if input_views == 0 || input_views >= set.len() {
            return Err(invalid("input_views", format!("{input_views} leaves no held-out view among {}", set.len())));
        }
        let idx: Vec<usize> = (0..set.len()).collect();
        Ok(TrainScene { inputs: set.subset(&idx[..input_views]), heldout: set.subset(&idx[input_views..]) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
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
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 evaluates only at the ends.
    pub eval_every: usize,
    /// Pixels per held-out view used for the held-out loss.
    pub eval_pixels: usize,
    /// Stop once held-out loss falls below this fraction of its initial value.
    pub early_stop_ratio: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            n: 32,
            channels: 4,
            input_views: 32,
            supervision_views: 5,
            pixels_per_view: 4096,
            samples_per_ray: 64,
            steps: 5000,
            lr_encoder: 1e-4,
            lr_decoder: 1e-5,
            lambda: None,
            weight_form: WeightForm::Squared,
            seed: 0,
            eval_every: 100,
            eval_pixels: 1024,
            early_stop_ratio: None,
            checkpoint_every: 0,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("channels", self.channels),
            ("input_views", self.input_views),
            ("supervision_views", self.supervision_views),
            ("pixels_per_view", self.pixels_per_view),
            ("eval_pixels", self.eval_pixels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.samples_per_ray < 2 {
            return Err(invalid("samples_per_ray", "must be at least 2"));
        }
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0) {
            return Err(invalid("learning rate", "must be positive"));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(invalid("lambda", format!("{l} is not positive")));
            }
        }
        if let Some(r) = self.early_stop_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(invalid("early_stop_ratio", format!("{r} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn unproject(&self) -> UnprojectConfig {
        UnprojectConfig { lambda: self.lambda.unwrap_or_else(|| default_lambda(self.n)), form: self.weight_form }
    }

    fn render(&self, seed: u64, jitter: bool) -> RenderConfig {
        RenderConfig { samples_per_ray: self.samples_per_ray, jitter, seed, ..Default::default() }
    }

    /// Jittered render settings used at training step `step`.
    pub fn step_render(&self, step: usize) -> RenderConfig {
        self.render(derive_seed(self.seed ^ 0x5eed, step as u64), true)
    }
}

/// Supervision rays of one step: a scene and `(input view, pixel)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub scene: usize,
    pub pixels: Vec<(usize, usize)>,
}

impl Batch {
    pub fn rays(&self, scene: &TrainScene) -> Vec<Ray> {
        self.pixels
            .iter()
            .map(|&(vi, p)| {
                let v = &scene.inputs.views[vi];
                let w = v.intrinsics.width;
                ray_for_pixel(&v.pose, &v.intrinsics, p % w, p / w)
            })
            .collect()
    }

    /// Jitter stream per ray: `view * H * W + pixel`.
    pub fn streams(&self, scene: &TrainScene) -> Vec<u64> {
        self.pixels.iter().map(|&(vi, p)| (vi * scene.inputs.views[vi].intrinsics.pixel_count() + p) as u64).collect()
    }

    pub fn targets(&self, scene: &TrainScene) -> Vec<f32> {
        self.pixels.iter().flat_map(|&(vi, p)| scene.inputs.views[vi].image.data()[3 * p..3 * p + 3].to_vec()).collect()
    }
}

/// Models as initialised by [`train_encoder`].
pub fn initial_models(cfg: &EncoderTrainConfig) -> Result<(Encoder, DecoderMlp)> {
    let mut enc = Encoder::new(cfg.n, cfg.channels, derive_seed(cfg.seed, 1))?;
    enc.unproject = cfg.unproject();
    Ok((enc, DecoderMlp::new(cfg.channels, derive_seed(cfg.seed, 2))))
}

/// Random stream that [`train_encoder`] draws its batches from.
pub fn batch_rng(cfg: &EncoderTrainConfig) -> rand_chacha::ChaCha8Rng {
    seeded(derive_seed(cfg.seed, 4))
}

pub fn draw_batch(rng: &mut impl Rng, scenes: &[TrainScene], cfg: &EncoderTrainConfig) -> Batch {
    let scene = rng.random_range(0..scenes.len());
    let inputs = &scenes[scene].inputs;
    let views = pick_pixels(rng, inputs.len(), cfg.supervision_views);
    let mut pixels = Vec::with_capacity(views.len() * cfg.pixels_per_view);
    for vi in views {
        let total = inputs.views[vi].intrinsics.pixel_count();
        pixels.extend(pick_pixels(rng, total, cfg.pixels_per_view).into_iter().map(|p| (vi, p)));
    }
    Batch { scene, pixels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub encoder: Encoder,
    pub decoder: DecoderMlp,
    pub log: Vec<StepLog>,
    pub initial_heldout: f64,
    pub final_heldout: f64,
    pub steps_run: usize,
}

/// Fixed pixel subset of a view, reproducible from `seed`.
fn pick_pixels(rng: &mut impl Rng, total: usize, count: usize) -> Vec<usize> {
    let mut px = sample(rng, total, count.min(total)).into_vec();
    px.sort_unstable();
    px
}

fn target_colors(view: &View, pixels: &[usize]) -> Vec<f32> {
    let d = view.image.data();
    pixels.iter().flat_map(|&p| d[3 * p..3 * p + 3].iter().copied()).collect()
}

/// Colours of selected pixels rendered from a volume without a tape.
pub fn render_pixels(vol: &FeatureVolume, decoder: &DecoderMlp, view: &View, pixels: &[usize], cfg: &RenderConfig) -> Vec<f32> {
    let field = NeuralField { volume: vol, decoder };
    let w = view.intrinsics.width;
    pixels
        .par_iter()
        .flat_map_iter(|&p| render_ray_field(&field, &ray_for_pixel(&view.pose, &view.intrinsics, p % w, p / w), cfg, p as u64).rgb)
        .collect()
}

struct EvalSet {
    /// `(scene, held-out view, pixels, target colours)`
    items: Vec<(usize, usize, Vec<usize>, Vec<f32>)>,
}

impl EvalSet {
    fn new(scenes: &[TrainScene], pixels: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let items = scenes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.heldout.len()).map(move |vi| (si, vi)))
            .map(|(si, vi)| {
                let view = &scenes[si].heldout.views[vi];
                let px = pick_pixels(&mut rng, view.intrinsics.pixel_count(), pixels);
                let tgt = target_colors(view, &px);
                (si, vi, px, tgt)
            })
            .collect();
        EvalSet { items }
    }

    fn loss(&self, scenes: &[TrainScene], enc: &Encoder, dec: &DecoderMlp, cfg: &RenderConfig) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut cached: Option<(usize, FeatureVolume)> = None;
        for (si, vi, px, tgt) in &self.items {
            if cached.as_ref().is_none_or(|(s, _)| s != si) {
                cached = Some((*si, enc.encode(&scenes[*si].inputs)?));
            }
            let vol = &cached.as_ref().expect("just filled").1;
            let got = render_pixels(vol, dec, &scenes[*si].heldout.views[*vi], px, cfg);
            total += got.iter().zip(tgt).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
            count += got.len();
        }
        Ok(total / count as f64)
    }
}

/// Trains extractor, refinement net and decoder end to end with an L2
/// colour loss on randomly sampled rays of the input views.
pub fn train_encoder(
    dataset: &[MultiViewSet],
    cfg: &EncoderTrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainedEncoder> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::Empty("encoder training set has no scenes"));
    }
    let scenes: Vec<TrainScene> = dataset.iter().map(|s| TrainScene::split(s, cfg.input_views)).collect::<Result<_>>()?;
    let (mut enc, mut dec) = initial_models(cfg)?;
    let plans: Vec<Arc<GatherPlan>> = scenes.iter().map(|s| unproject_plan(&s.inputs, cfg.n, &enc.unproject)).collect::<Result<_>>()?;
    let images: Vec<Tensor<f32>> = scenes.iter().map(|s| images_tensor(&s.inputs)).collect::<Result<_>>()?;

    let eval = EvalSet::new(&scenes, cfg.eval_pixels, derive_seed(cfg.seed, 3));
    let eval_cfg = cfg.render(0, false);
    let initial_heldout = eval.loss(&scenes, &enc, &dec, &eval_cfg)?;
    let mut final_heldout = initial_heldout;

    let mut enc_state = AdamState::new(&enc.params);
    let mut dec_state = AdamState::new(dec.params());
    let enc_adam = AdamConfig::new(cfg.lr_encoder);
    let dec_adam = AdamConfig::new(cfg.lr_decoder);
    let mut rng = batch_rng(cfg);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let batch = draw_batch(&mut rng, &scenes, cfg);
        let si = batch.scene;
        let rays = batch.rays(&scenes[si]);
        let streams = batch.streams(&scenes[si]);
        let target = batch.targets(&scenes[si]);
        let rcfg = cfg.step_render(step);

        let mut t = Tape::<f32>::new();
        let eb = enc.params.bind(&mut t, true);
        let db = dec.params().bind(&mut t, true);
        let imgs = t.constant(images[si].clone());
        let feats = enc.extractor.forward(&mut t, &eb, imgs)?;
        let flat = t.sparse_gather(feats, plans[si].clone())?;
        let n = cfg.n;
        let coarse = t.reshape(flat, [1, cfg.channels, n, n, n])?;
        let fine = enc.refine.forward(&mut t, &eb, coarse)?;
        let pred = render_rays_var(&mut t, fine, &dec, &db, &rays, &streams, &rcfg)?;
        let tgt = t.constant(Tensor::new([rays.len(), 3], target)?);
        let loss = t.mse(pred, tgt)?;
        let loss_value = t.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(invalid("training", format!("non-finite loss at step {step}")));
        }
        let grads = t.backward(loss)?;
        let eg = eb.grads(&grads, &enc.params);
        let dg = db.grads(&grads, dec.params());
        adam_step_store(&mut enc.params, &eg, &mut enc_state, &enc_adam)?;
        adam_step_store(dec.params_mut(), &dg, &mut dec_state, &dec_adam)?;
        steps_run = step + 1;

        let last = steps_run == cfg.steps;
        let heldout_loss = if last || (cfg.eval_every > 0 && steps_run % cfg.eval_every == 0) {
            final_heldout = eval.loss(&scenes, &enc, &dec, &eval_cfg)?;
            Some(final_heldout)
        } else {
            None
        };
        let entry = StepLog { step, loss: loss_value, heldout_loss };
        on_step(&entry);
        log.push(entry);
        if let Some(path) = checkpoint_path {
            if cfg.checkpoint_every > 0 && steps_run % cfg.checkpoint_every == 0 {
                save_checkpoint(path, &enc, &dec)?;
            }
        }
        let converged = heldout_loss.zip(cfg.early_stop_ratio).is_some_and(|(h, r)| h < r * initial_heldout);
        if converged {
            break;
        }
    }
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, &enc, &dec)?;
    }
    Ok(TrainedEncoder { encoder: enc, decoder: dec, log, initial_heldout, final_heldout, steps_run })
}

/// Mean PSNR over the held-out views of `scenes` when encoding from the
/// first `input_views` inputs.
pub fn heldout_psnr(enc: &Encoder, dec: &DecoderMlp, scenes: &[TrainScene], input_views: usize, samples: usize) -> Result<f64> {
    if scenes.is_empty() {
        return Err(CoreError::Empty("no scenes to evaluate"));
    }
    let cfg = RenderConfig { samples_per_ray: samples, jitter: false, ..Default::default() };
    let mut total = 0.0;
    let mut count = 0;
    for s in scenes {
        if input_views == 0 || input_views > s.inputs.len() {
            return Err(invalid("input_views", format!("{input_views} outside 1..={}", s.inputs.len())));
        }
        let idx: Vec<usize> = (0..input_views).collect();
        let vol = enc.encode(&s.inputs.subset(&idx))?;
        for v in &s.heldout.views {
            let r = render_image(&vol, dec, &v.pose, &v.intrinsics, &cfg)?;
            total += psnr(&r.rgb, &v.image)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Held-out image MSE of a given volume.
pub fn heldout_mse(vol: &FeatureVolume, dec: &DecoderMlp, heldout: &MultiViewSet, samples: usize) -> Result<f64> {
    let cfg = RenderConfig { samples_per_ray: samples, jitter: false, ..Default::default() };
    let mut total = 0.0;
    for v in &heldout.views {
        total += render_image(vol, dec, &v.pose, &v.intrinsics, &cfg)?.rgb.mse(&v.image)?;
    }
    Ok(total / heldout.len().max(1) as f64)
}

/// Standard checkpoint file name inside a run directory.
pub fn checkpoint_file(dir: &Path) -> PathBuf {
    dir.join("encoder.vdcp")
}

/// `[V, c, H, W]` feature maps that are constant per view and channel.
pub fn constant_features(views: usize, c: usize, w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
    Tensor::from_fn([views, c, h, w], |i| {
        let view = i / (c * h * w);
        let ch = (i / (h * w)) % c;
        f(view, ch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraPose, Intrinsics};
    use crate::raster::Image;
    use nalgebra::Matrix3;

    fn view_at(eye: Vec3, depth: f32, w: usize, h: usize) -> View {
        let pose = CameraPose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap();
        let k = Intrinsics::new(50.0, w, h).unwrap();
        View { image: Image::filled(w, h, &[0.5; 3]), depth: Image::filled(w, h, &[depth]), pose, intrinsics: k }
    }

    #[test]
    fn bilinear_taps_at_centre_and_edges() {
        let t = bilinear_taps(1.5, 2.5, 4, 4).unwrap();
        assert_eq!(t, vec![(9, 1.0)]);
        let t = bilinear_taps(2.0, 2.5, 4, 4).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|&(_, w)| (w - 0.5).abs() < 1e-12));
        assert!(bilinear_taps(4.01, 1.0, 4, 4).is_none());
        assert_eq!(bilinear_taps(0.0, 0.0, 4, 4).unwrap(), vec![(0, 1.0)]);
    }

    #[test]
    fn zero_depth_difference_gives_sampled_feature() {
        // n = 1: the only voxel centre is the origin, at distance 2
        let eye = Vec3::new(0.0, 0.0, 2.0);
        let set = MultiViewSet { views: vec![view_at(eye, 2.0, 8, 8)] };
        let feats = constant_features(1, 2, 8, 8, |_, ch| [0.3, -1.2][ch]);
        let v = unproject(&feats, &set, 1, &UnprojectConfig::for_resolution(1)).unwrap();
        let expect = |f: f64| (f / (1.0 + FUSE_EPS)) as f32;
        assert_eq!(v.data(), &[expect(0.3f32 as f64), expect(-1.2f32 as f64)]);
    }

    #[test]
    fn symmetric_views_average() {
        let a = view_at(Vec3::new(0.0, 0.0, 2.0), 2.0, 8, 8);
        let b = view_at(Vec3::new(0.0, 0.0, -2.0), 2.0, 8, 8);
        let set = MultiViewSet { views: vec![a, b] };
        let feats = constant_features(2, 1, 8, 8, |v, _| [1.0, 3.0][v]);
        let v = unproject(&feats, &set, 1, &UnprojectConfig::for_resolution(1)).unwrap();
        assert!((v.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn far_view_contribution_is_negligible() {
        let n = 32;
        let cfg = UnprojectConfig::for_resolution(n);
        assert_eq!(cfg.lambda, 5120.0);
        let w = cfg.form.weight(cfg.lambda, 0.05);
        assert!((w - (-12.8f64).exp()).abs() < 1e-15);
        assert!((w - 2.76e-6).abs() < 0.01e-6);
        // voxel nearest the origin, seen by two opposite views
        let p = Vec3::from(voxel_center(n, [16, 16, 16]));
        let d_front = camera_distance(&CameraPose::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y()).unwrap(), &p);
        let d_back = camera_distance(&CameraPose::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::zeros(), Vec3::y()).unwrap(), &p);
        let a = view_at(Vec3::new(0.0, 0.0, 2.0), (d_front + 0.05) as f32, 16, 16);
        let b = view_at(Vec3::new(0.0, 0.0, -2.0), d_back as f32, 16, 16);
        let set = MultiViewSet { views: vec![a, b] };
        let feats = constant_features(2, 1, 16, 16, |v, _| [100.0, 1.0][v]);
        let vol = unproject(&feats, &set, n, &cfg).unwrap();
        let got = vol.get(0, [16, 16, 16]) as f64;
        // f32 depth storage perturbs dd slightly; both weights are recomputed
        let w_front = cfg.form.weight(cfg.lambda, (d_front + 0.05) as f32 as f64 - d_front);
        let w_back = cfg.form.weight(cfg.lambda, d_back as f32 as f64 - d_back);
        let expect = (100.0 * w_front + w_back) / (w_front + w_back + FUSE_EPS);
        assert!((got - expect).abs() < 1e-4 * expect);
        assert!(w_front / (w_front + w_back) < 1e-5);
    }

    #[test]
    fn background_and_unseen_voxels_are_zero() {
        let eye = Vec3::new(0.0, 0.0, 2.0);
        let set = MultiViewSet { views: vec![view_at(eye, 0.0, 8, 8)] };
        let feats = constant_features(1, 1, 8, 8, |_, _| 5.0);
        let v = unproject(&feats, &set, 4, &UnprojectConfig::for_resolution(4)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        // a camera looking away sees nothing
        let pose = CameraPose::new(Matrix3::identity(), Vec3::new(0.0, 0.0, -3.0)).unwrap();
        let mut away = view_at(eye, 2.0, 8, 8);
        away.pose = pose;
        let set = MultiViewSet { views: vec![away] };
        let v = unproject(&feats, &set, 4, &UnprojectConfig::for_resolution(4)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_form_is_sign_symmetric() {
        let f = WeightForm::Linear;
        assert_eq!(f.weight(10.0, 0.1), f.weight(10.0, -0.1));
        assert!((f.weight(10.0, 0.1) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn extractor_shapes_and_zero_input() {
        let mut store = ParamStore::new();
        let ex = FeatureExtractor::new(&mut store, 4, &mut seeded(0));
        for t in store.tensors_mut() {
            if t.rank() == 4 && t.shape()[0] == 1 {
                t.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::<f32>::new();
        let b = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 3, 9, 7]));
        let y = ex.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 9, 7]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros([1, 4, 9, 7]));
        assert!(ex.forward(&mut tape, &b, bad).is_err());
    }

    #[test]
    fn refine_starts_as_identity() {
        let mut store = ParamStore::new();
        let net = RefineNet::new(&mut store, 4, &mut seeded(3));
        let x = Tensor::from_fn([1, 4, 8, 8, 8], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        let mut t = Tape::<f32>::new();
        let b = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = net.forward(&mut t, &b, xv).unwrap();
        assert_eq!(t.value(y), &x);
        let bad = t.constant(Tensor::zeros([1, 4, 6, 6, 6]));
        assert!(net.forward(&mut t, &b, bad).is_err());
    }
}
