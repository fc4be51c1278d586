//! Emission-absorption ray marching over feature volumes and analytic fields.
//!
//! Each ray interval `[t_near, t_far]` of length `s` is split into `S` equal
//! strata of width `s / S`, one sample per stratum (jittered or centred).
//! `alpha_k = 1 - exp(-sigma_k delta_k)`, `T_k = prod_{j<k} (1 - alpha_j)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use voldiff_autodiff::ops::elementwise::{sigmoid, softplus};
use voldiff_autodiff::{gemm, Bound, Element, ParamStore, SamplePoints, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::geometry::{ray_for_pixel, CameraPose, Intrinsics, Ray};
use crate::nn::{seeded, Linear};
use crate::raster::Image;
use crate::volume::FeatureVolume;

/// Density of a baked volume is `DENSITY_SCALE * relu(f0)`.
pub const DENSITY_SCALE: f32 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub background: [f32; 3],
    /// Stratification jitter; `false` samples stratum midpoints.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { samples_per_ray: 64, background: [1.0; 3], jitter: true, seed: 0 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(invalid("samples_per_ray", format!("{} < 2", self.samples_per_ray)));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("background", format!("{:?} outside [0, 1]", self.background)));
        }
        Ok(())
    }
}

/// Per-pixel stream so results do not depend on traversal order.
pub fn pixel_rng(seed: u64, pixel: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(pixel);
    r
}

/// Sample distances and the common stratum width for one ray.
pub fn stratified(ray: &Ray, samples: usize, jitter: Option<&mut ChaCha8Rng>) -> (Vec<f64>, f64) {
    if !ray.hits() {
        return (vec![ray.t_near; samples], 0.0);
    }
    let delta = (ray.t_far - ray.t_near) / samples as f64;
    let ts = match jitter {
        Some(rng) => (0..samples).map(|k| ray.t_near + (k as f64 + rng.random::<f64>()) * delta).collect(),
        None => (0..samples).map(|k| ray.t_near + (k as f64 + 0.5) * delta).collect(),
    };
    (ts, delta)
}

/// Density and colour at a batch of points.
pub trait Field: Sync {
    /// `sigma[i]` and `rgb[3i..3i+3]` for `points[i]`.
    fn eval(&self, points: &[[f64; 3]], sigma: &mut [f32], rgb: &mut [f32]);
}

/// Maps interpolated features to density and colour.
pub trait Decoder: Sync {
    fn channels(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// `feats [P, c] -> (sigma [P, 1], rgb [P, 3])` on a tape.
    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, feats: Var) -> Result<(Var, Var)>;
    /// Row-major `feats [P, c]` into `sigma [P]`, `rgb [P, 3]`.
    fn decode_batch(&self, feats: &[f32], sigma: &mut [f32], rgb: &mut [f32]);
}

/// Five fully connected layers (`c -> 64 -> 64 -> 64 -> 64 -> 4`), ReLU
/// between; density `DENSITY_GAIN * softplus`, sigmoid colour.
#[derive(Clone, Debug)]
pub struct DecoderMlp {
    params: ParamStore,
    layers: Vec<Linear>,
    channels: usize,
}

impl DecoderMlp {
    pub const HIDDEN: usize = 64;
    pub const DENSITY_GAIN: f64 = 10.0;
    pub const LAYERS: usize = 5;

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(Self::LAYERS);
        let mut fan_in = channels;
        for i in 0..Self::LAYERS {
            let out = if i + 1 == Self::LAYERS { 4 } else { Self::HIDDEN };
            layers.push(Linear::new(&mut params, &format!("decoder.{i}"), fan_in, out, &mut rng));
            fan_in = out;
        }
        DecoderMlp { params, layers, channels }
    }
}

impl Decoder for DecoderMlp {
    fn channels(&self) -> usize {
        self.channels
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, feats: Var) -> Result<(Var, Var)> {
        let mut h = feats;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, b, h)?;
            if i + 1 < self.layers.len() {
                h = t.relu(h)?;
            }
        }
        let s = t.slice(h, 1, 0, 1)?;
        let c = t.slice(h, 1, 1, 4)?;
        let s = t.softplus(s)?;
        Ok((t.scale(s, Self::DENSITY_GAIN)?, t.sigmoid(c)?))
    }

    fn decode_batch(&self, feats: &[f32], sigma: &mut [f32], rgb: &mut [f32]) {
        let p = sigma.len();
        let mut h = feats.to_vec();
        let mut width = self.channels;
        for (i, l) in self.layers.iter().enumerate() {
            let w = self.params.get(l.w);
            let bias = self.params.get(l.b).data();
            let out = w.shape()[1];
            let mut next = Vec::with_capacity(p * out);
            for _ in 0..p {
                next.extend_from_slice(bias);
            }
            gemm(false, false, p, width, out, &h, w.data(), 1.0f32, &mut next);
            if i + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
            width = out;
        }
        for (k, row) in h.chunks(4).enumerate() {
            sigma[k] = Self::DENSITY_GAIN as f32 * softplus(row[0]);
            for j in 0..3 {
                rgb[3 * k + j] = sigmoid(row[1 + j]);
            }
        }
    }
}

/// Parameter-free decoder for baked volumes: `sigma = DENSITY_SCALE *
/// relu(f0)`, `rgb = clamp(f1..f3, 0, 1)`.
#[derive(Clone, Debug, Default)]
pub struct FieldDecoder {
    params: ParamStore,
}

impl FieldDecoder {
    pub fn new() -> Self {
        FieldDecoder::default()
    }
}

impl Decoder for FieldDecoder {
    fn channels(&self) -> usize {
        4
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward<T: Element>(&self, t: &mut Tape<T>, _b: &Bound, feats: Var) -> Result<(Var, Var)> {
        let d = t.slice(feats, 1, 0, 1)?;
        let d = t.relu(d)?;
        let sigma = t.scale(d, DENSITY_SCALE as f64)?;
        let c = t.slice(feats, 1, 1, 4)?;
        let one = t.constant(Tensor::ones([1, 1]));
        let lo = t.relu(c)?;
        let shifted = t.sub(c, one)?;
        let hi = t.relu(shifted)?;
        Ok((sigma, t.sub(lo, hi)?))
    }

    fn decode_batch(&self, feats: &[f32], sigma: &mut [f32], rgb: &mut [f32]) {
        for (k, row) in feats.chunks(4).enumerate() {
            sigma[k] = DENSITY_SCALE * row[0].max(0.0);
            for j in 0..3 {
                rgb[3 * k + j] = row[1 + j].clamp(0.0, 1.0);
            }
        }
    }
}

/// A feature volume seen through a decoder. Points outside the box have
/// zero density.
pub struct NeuralField<'a, D: Decoder> {
    pub volume: &'a FeatureVolume,
    pub decoder: &'a D,
}

impl<D: Decoder> Field for NeuralField<'_, D> {
    fn eval(&self, points: &[[f64; 3]], sigma: &mut [f32], rgb: &mut [f32]) {
        let c = self.volume.c();
        let mut feats = vec![0.0f32; points.len() * c];
        for (p, f) in points.iter().zip(feats.chunks_mut(c)) {
            self.volume.sample_into(*p, f);
        }
        self.decoder.decode_batch(&feats, sigma, rgb);
        for (p, s) in points.iter().zip(sigma.iter_mut()) {
            if p.iter().any(|v| v.abs() > 1.0) {
                *s = 0.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub rgb: [f32; 3],
    pub opacity: f32,
    pub depth: f32,
}

/// Front-to-back compositing of precomputed samples.
pub fn composite(sigma: &[f32], rgb: &[f32], ts: &[f64], delta: f64, background: [f32; 3]) -> RaySample {
    let mut trans = 1.0f64;
    let mut acc = [0.0f64; 3];
    let mut depth = 0.0f64;
    for (k, &s) in sigma.iter().enumerate() {
        let alpha = 1.0 - (-(s as f64) * delta).exp();
        let w = trans * alpha;
        for j in 0..3 {
            acc[j] += w * rgb[3 * k + j] as f64;
        }
        depth += w * ts[k];
        trans *= 1.0 - alpha;
    }
    let opacity = 1.0 - trans;
    let rgb = std::array::from_fn(|j| (acc[j] + trans * background[j] as f64) as f32);
    RaySample { rgb, opacity: opacity as f32, depth: (depth / opacity.max(1e-10)) as f32 }
}

/// Marches one ray through `field`; `stream` selects the jitter stream.
pub fn render_ray_field(field: &impl Field, ray: &Ray, cfg: &RenderConfig, stream: u64) -> RaySample {
    if !ray.hits() {
        return RaySample { rgb: cfg.background, opacity: 0.0, depth: 0.0 };
    }
    let s = cfg.samples_per_ray;
    let mut rng = cfg.jitter.then(|| pixel_rng(cfg.seed, stream));
    let (ts, delta) = stratified(ray, s, rng.as_mut());
    let pts: Vec<[f64; 3]> = ts.iter().map(|&t| ray.at(t).into()).collect();
    let mut sigma = vec![0.0; s];
    let mut rgb = vec![0.0; 3 * s];
    field.eval(&pts, &mut sigma, &mut rgb);
    composite(&sigma, &rgb, &ts, delta, cfg.background)
}

pub fn render_ray<D: Decoder>(vol: &FeatureVolume, decoder: &D, ray: &Ray, cfg: &RenderConfig) -> RaySample {
    render_ray_field(&NeuralField { volume: vol, decoder }, ray, cfg, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub rgb: Image,
    pub depth: Image,
    pub opacity: Image,
}

/// Renders every pixel; pixel `i` (row-major) uses jitter stream `i`.
pub fn render_image_field(field: &impl Field, pose: &CameraPose, k: &Intrinsics, cfg: &RenderConfig) -> Result<Rendered> {
    cfg.validate()?;
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<RaySample>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| render_ray_field(field, &ray_for_pixel(pose, k, x, y), cfg, (y * w + x) as u64)).collect())
        .collect();
    let samples: Vec<RaySample> = rows.into_iter().flatten().collect();
    let rgb = samples.iter().flat_map(|s| s.rgb).collect();
    let depth = samples.iter().map(|s| s.depth).collect();
    let opacity = samples.iter().map(|s| s.opacity).collect();
    Ok(Rendered { rgb: Image::new(w, h, 3, rgb)?, depth: Image::new(w, h, 1, depth)?, opacity: Image::new(w, h, 1, opacity)? })
}

pub fn render_image<D: Decoder>(
    vol: &FeatureVolume,
    decoder: &D,
    pose: &CameraPose,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<Rendered> {
    if vol.c() != decoder.channels() {
        return Err(invalid("decoder", format!("expects {} channels, volume has {}", decoder.channels(), vol.c())));
    }
    render_image_field(&NeuralField { volume: vol, decoder }, pose, k, cfg)
}

/// Strictly upper-triangular ones: `(x U)[k] = sum_{j<k} x[j]`.
fn exclusive_cumsum_matrix<T: Element>(s: usize) -> Tensor<T> {
    Tensor::from_fn([s, s], |i| if i / s < i % s { T::one() } else { T::zero() })
}

/// Differentiable render of a batch of rays through `volume` (`[1, c, n, n,
/// n]` on the tape). Returns `[rays, 3]` colours. Ray `r` uses jitter
/// stream `streams[r]`.
pub fn render_rays_var<T: Element, D: Decoder>(
    t: &mut Tape<T>,
    volume: Var,
    decoder: &D,
    bound: &Bound,
    rays: &[Ray],
    streams: &[u64],
    cfg: &RenderConfig,
) -> Result<Var> {
    cfg.validate()?;
    if rays.is_empty() || rays.len() != streams.len() {
        return Err(invalid("rays", format!("{} rays, {} streams", rays.len(), streams.len())));
    }
    let (r, s) = (rays.len(), cfg.samples_per_ray);
    let mut pts = Vec::with_capacity(r * s);
    let mut deltas = Vec::with_capacity(r * s);
    for (ray, &stream) in rays.iter().zip(streams) {
        let mut rng = cfg.jitter.then(|| pixel_rng(cfg.seed, stream));
        let (ts, delta) = stratified(ray, s, rng.as_mut());
        for t_k in ts {
            let p: [f64; 3] = ray.at(t_k).into();
            let inside = ray.hits() && p.iter().all(|v| v.abs() <= 1.0);
            pts.push(if inside { p } else { [0.0; 3] });
            deltas.push(if inside { T::from_f64c(delta) } else { T::zero() });
        }
    }
    let feats = t.trilinear_sample(volume, Arc::new(SamplePoints(pts)))?;
    let (sigma, rgb) = decoder.forward(t, bound, feats)?;
    let delta = t.constant(Tensor::new([r * s, 1], deltas)?);
    let sd = t.mul(sigma, delta)?;
    let sd = t.reshape(sd, [r, s])?;
    // transmittance before each sample and alpha of each sample
    let tri = t.constant(exclusive_cumsum_matrix(s));
    let cum = t.matmul(sd, tri)?;
    let neg_cum = t.scale(cum, -1.0)?;
    let trans = t.exp(neg_cum)?;
    let neg_sd = t.scale(sd, -1.0)?;
    let keep = t.exp(neg_sd)?;
    let ones = t.constant(Tensor::ones([1, 1]));
    let alpha = t.sub(ones, keep)?;
    let w = t.mul(trans, alpha)?;
    let w = t.reshape(w, [r, s, 1])?;
    let rgb = t.reshape(rgb, [r, s, 3])?;
    let wc = t.mul(w, rgb)?;
    let color = t.sum_axis(wc, 1)?;
    let total = t.sum_axis(sd, 1)?;
    let total = t.reshape(total, [r, 1])?;
    let neg_total = t.scale(total, -1.0)?;
    let t_final = t.exp(neg_total)?;
    let bg = t.constant(Tensor::new([1, 3], cfg.background.iter().map(|&b| T::from_f64c(b as f64)).collect())?);
    let bg_term = t.mul(t_final, bg)?;
    Ok(t.add(color, bg_term)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    struct Constant {
        sigma: f32,
        rgb: [f32; 3],
    }

    impl Field for Constant {
        fn eval(&self, points: &[[f64; 3]], sigma: &mut [f32], rgb: &mut [f32]) {
            for i in 0..points.len() {
                sigma[i] = self.sigma;
                rgb[3 * i..3 * i + 3].copy_from_slice(&self.rgb);
            }
        }
    }

    fn axis_ray() -> Ray {
        Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0))
    }

    #[test]
    fn constant_density_chord_opacity() {
        for sigma in [0.1f32, 0.7, 2.0] {
            let cfg = RenderConfig { samples_per_ray: 64, ..Default::default() };
            let r = render_ray_field(&Constant { sigma, rgb: [0.0; 3] }, &axis_ray(), &cfg, 3);
            let exact = 1.0 - (-(sigma as f64) * 2.0).exp();
            assert!((r.opacity as f64 - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_field_gives_background() {
        let cfg = RenderConfig { background: [0.2, 0.4, 0.6], ..Default::default() };
        let r = render_ray_field(&Constant { sigma: 0.0, rgb: [1.0; 3] }, &axis_ray(), &cfg, 0);
        assert_eq!(r.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(r.opacity, 0.0);
    }

    #[test]
    fn opaque_slab_shows_its_colour() {
        let cfg = RenderConfig::default();
        let r = render_ray_field(&Constant { sigma: 200.0, rgb: [0.3, 0.9, 0.1] }, &axis_ray(), &cfg, 0);
        for (a, b) in r.rgb.iter().zip([0.3, 0.9, 0.1]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn field_decoder_clamps_and_scales() {
        let d = FieldDecoder::new();
        let mut s = [0.0; 2];
        let mut c = [0.0; 6];
        d.decode_batch(&[0.5, -0.2, 0.4, 1.7, -1.0, 0.0, 0.0, 0.0], &mut s, &mut c);
        assert_eq!(s, [0.5 * DENSITY_SCALE, 0.0]);
        assert_eq!(&c[..3], &[0.0, 0.4, 1.0]);
    }

    #[test]
    fn mlp_batch_decode_matches_tape() {
        let d = DecoderMlp::new(4, 9);
        let feats: Vec<f32> = (0..20).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut s = [0.0; 5];
        let mut c = [0.0; 15];
        d.decode_batch(&feats, &mut s, &mut c);
        let mut t = Tape::new();
        let b = d.params().bind(&mut t, false);
        let f = t.constant(Tensor::new([5, 4], feats).unwrap());
        let (sv, cv) = d.forward(&mut t, &b, f).unwrap();
        for (a, b) in s.iter().zip(t.value(sv).data()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in c.iter().zip(t.value(cv).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tape_render_matches_scalar_render() {
        let vol = FeatureVolume::from_fn(8, 4, |ch, p| match ch {
            0 => (0.6 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).max(0.0) as f32,
            c => 0.3 * c as f32,
        });
        let pose = CameraPose::look_at(Vec3::new(0.4, 0.5, 1.8), Vec3::zeros(), Vec3::y()).unwrap();
        let k = Intrinsics::new(50.0, 6, 5).unwrap();
        let cfg = RenderConfig { samples_per_ray: 16, ..Default::default() };
        let dec = FieldDecoder::new();
        let img = render_image(&vol, &dec, &pose, &k, &cfg).unwrap();
        let rays: Vec<Ray> = (0..30).map(|i| ray_for_pixel(&pose, &k, i % 6, i / 6)).collect();
        let streams: Vec<u64> = (0..30).collect();
        let mut t = Tape::<f64>::new();
        let v = t.constant(vol.to_tensor().cast());
        let b = dec.params().cast().bind(&mut t, false);
        let out = render_rays_var(&mut t, v, &dec, &b, &rays, &streams, &cfg).unwrap();
        for (a, b) in img.rgb.data().iter().zip(t.value(out).data()) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
