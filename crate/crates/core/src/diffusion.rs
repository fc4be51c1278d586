//! Noise schedules, low-frequency noise, the forward process, a
//! caption-conditioned 3D U-Net denoiser, training and ancestral sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use voldiff_autodiff::{
    adam_step_store, checkpoint, AdamConfig, AdamState, Bound, ConvSpec, Element, ParamStore, Tape, Tensor, Var,
};

use crate::error::{invalid, CoreError, Result};
use crate::nn::{derive_seed, seeded, Conv, GroupNorm, Linear, UpConv};
use crate::text::{fnv1a64, Condition, EMBED_DIM};
use crate::volume::FeatureVolume;

pub const MAX_BETA: f64 = 0.999;
pub const SNR_CAP: f64 = 1e12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
    pub sigmoid_start: f64,
    pub sigmoid_end: f64,
    pub sigmoid_tau: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.03,
            cosine_offset: 0.008,
            sigmoid_start: -3.0,
            sigmoid_end: 3.0,
            sigmoid_tau: 1.0,
        }
    }
}

/// `beta_t` and cumulative `gamma_t = prod_{s<=t} (1 - beta_s)` for
/// `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule", "needs at least one step"));
        }
        if let Some(t) = betas.iter().position(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("schedule", format!("beta_{} = {} outside (0, 1)", t + 1, betas[t])));
        }
        let mut g = 1.0;
        let mut gammas = Vec::with_capacity(betas.len());
        for b in &betas {
            g *= 1.0 - b;
            gammas.push(g);
        }
        Ok(NoiseSchedule { kind, betas, gammas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `gamma_0 = 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.gammas[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn snr(&self, t: usize) -> f64 {
        snr_of(self.gamma(t))
    }

    /// FNV-1a over the kind and the bit patterns of every beta, as hex.
    pub fn fingerprint(&self) -> String {
        let mut bytes = format!("{:?}", self.kind).into_bytes();
        for b in &self.betas {
            bytes.extend_from_slice(&b.to_bits().to_le_bytes());
        }
        format!("{:016x}", fnv1a64(&bytes))
    }
}

/// `gamma / (1 - gamma)`, capped at [`SNR_CAP`].
pub fn snr_of(gamma: f64) -> f64 {
    let rest = 1.0 - gamma;
    if rest * SNR_CAP <= gamma {
        SNR_CAP
    } else {
        gamma / rest
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Betas from a continuous `gamma(tau)` on `[0, 1]` with `gamma(0) = 1`.
fn betas_from_gamma(steps: usize, g: impl Fn(f64) -> f64) -> Vec<f64> {
    (1..=steps)
        .map(|t| {
            let prev = g((t - 1) as f64 / steps as f64);
            let cur = g(t as f64 / steps as f64);
            (1.0 - cur / prev).min(MAX_BETA)
        })
        .collect()
}

pub fn build_schedule(spec: &ScheduleSpec) -> Result<NoiseSchedule> {
    let t = spec.steps;
    if t == 0 {
        return Err(invalid("steps", "must be at least 1"));
    }
    let betas = match spec.kind {
        ScheduleKind::Linear => {
            let (b1, bt) = (spec.beta_start, spec.beta_end);
            if !(b1 > 0.0 && b1 <= bt && bt < 1.0) {
                return Err(invalid("beta range", format!("need 0 < {b1} <= {bt} < 1")));
            }
            if t == 1 {
                vec![b1]
            } else {
                (0..t).map(|i| b1 + (bt - b1) * i as f64 / (t - 1) as f64).collect()
            }
        }
        ScheduleKind::Cosine => {
            let s = spec.cosine_offset;
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("cosine_offset", format!("{s} is negative or not finite")));
            }
            let f = |tau: f64| ((tau + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            betas_from_gamma(t, |tau| f(tau) / f0)
        }
        ScheduleKind::Sigmoid => {
            let (a, b, tau) = (spec.sigmoid_start, spec.sigmoid_end, spec.sigmoid_tau);
            if !(a < b && tau > 0.0) {
                return Err(invalid("sigmoid schedule", format!("need start {a} < end {b} and tau {tau} > 0")));
            }
            let (va, vb) = (sigmoid(a / tau), sigmoid(b / tau));
            betas_from_gamma(t, |x| (vb - sigmoid((x * (b - a) + a) / tau)) / (vb - va))
        }
    };
    NoiseSchedule::from_betas(spec.kind, betas)
}

/// `sqrt(1 - alpha) e1 + sqrt(alpha) e2` with `e1` per element and `e2`
/// one draw per channel of `per_channel` elements. Each channel draws its
/// shared value first, then its elements.
pub fn sample_lowfreq_noise(channels: usize, per_channel: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("alpha", format!("{alpha} outside [0, 1]")));
    }
    let (a, b) = ((1.0 - alpha).sqrt(), alpha.sqrt());
    let mut out = Vec::with_capacity(channels * per_channel);
    for _ in 0..channels {
        let shared: f64 = rng.sample(StandardNormal);
        for _ in 0..per_channel {
            let e: f64 = rng.sample(StandardNormal);
            out.push((a * e + b * shared) as f32);
        }
    }
    Ok(out)
}

/// `sqrt(gamma) x0 + sqrt(1 - gamma) noise`, elementwise.
pub fn q_sample_gamma(x0: &[f32], gamma: f64, noise: &[f32]) -> Result<Vec<f32>> {
    if x0.len() != noise.len() {
        return Err(invalid("noise", format!("{} values for {} elements", noise.len(), x0.len())));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid("gamma", format!("{gamma} outside [0, 1]")));
    }
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

pub fn q_sample(x0: &FeatureVolume, t: usize, schedule: &NoiseSchedule, noise: &[f32]) -> Result<FeatureVolume> {
    if t > schedule.steps() {
        return Err(invalid("t", format!("{t} > T = {}", schedule.steps())));
    }
    FeatureVolume::new(x0.n(), x0.c(), q_sample_gamma(x0.data(), schedule.gamma(t), noise)?)
}

/// DDPM posterior `q(x_{t-1} | x_t, x0)`: mean coefficients on `x0` and
/// `x_t`, and the variance.
pub fn posterior_coefficients(s: &NoiseSchedule, t: usize) -> (f64, f64, f64) {
    let (g, gp, b) = (s.gamma(t), s.gamma(t - 1), s.beta(t));
    let c0 = gp.sqrt() * b / (1.0 - g);
    let ct = (1.0 - b).sqrt() * (1.0 - gp) / (1.0 - g);
    (c0, ct, b * (1.0 - gp) / (1.0 - g))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    #[default]
    X0,
    Epsilon,
}

/// Sinusoidal timestep features `[B, dim]`.
pub fn timestep_features(steps: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    Tensor::from_fn([steps.len(), dim], |i| {
        let (b, k) = (i / dim, i % dim);
        let freq = (-(10000f64.ln()) * (k % half) as f64 / half as f64).exp();
        let a = steps[b] as f64 * freq;
        (if k < half { a.sin() } else { a.cos() }) as f32
    })
}

/// A network mapping `(x_t [B, c, n, n, n], t, condition)` to a prediction
/// of the same shape.
pub trait Denoise {
    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var, steps: &[usize], conds: &[&Condition]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n: usize,
    pub channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { n: 16, channels: 4, width1: 16, width2: 32, attn_dim: 32, time_dim: 32 }
    }
}

const TIME_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug)]
struct TBlock {
    conv: Conv,
    temb: Linear,
    norm: GroupNorm,
    co: usize,
}

impl TBlock {
    fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, stride: usize, rng: &mut impl Rng) -> Self {
        TBlock {
            conv: Conv::new(store, &format!("{name}.conv"), ci, co, 3, ConvSpec::new(stride, 1), 3, rng),
            temb: Linear::new(store, &format!("{name}.temb"), TIME_HIDDEN, co, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), co, 8),
            co,
        }
    }

    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var, hidden: Var) -> Result<Var> {
        let batch = t.value(x).shape()[0];
        let h = self.conv.forward(t, b, x)?;
        let e = self.temb.forward(t, b, hidden)?;
        let e = t.reshape(e, [batch, self.co, 1, 1, 1])?;
        let h = t.add(h, e)?;
        let h = self.norm.forward(t, b, h)?;
        Ok(t.relu(h)?)
    }
}

/// Residual cross-attention from voxels to caption tokens.
#[derive(Clone, Copy, Debug)]
struct CrossAttn {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttn {
    fn new(store: &mut ParamStore, name: &str, ch: usize, d: usize, rng: &mut impl Rng) -> Self {
        CrossAttn {
            norm: GroupNorm::new(store, &format!("{name}.norm"), ch, 8),
            q: Linear::new(store, &format!("{name}.q"), ch, d, rng),
            k: Linear::new(store, &format!("{name}.k"), EMBED_DIM, d, rng),
            v: Linear::new(store, &format!("{name}.v"), EMBED_DIM, d, rng),
            o: Linear::zeroed(store, &format!("{name}.o"), d, ch),
        }
    }

    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var, conds: &[Var]) -> Result<Var> {
        let shape = t.value(x).shape().to_vec();
        let (ch, s) = (shape[1], shape[2..].iter().product::<usize>());
        let h = self.norm.forward(t, b, x)?;
        let mut outs = Vec::with_capacity(conds.len());
        for (i, &c) in conds.iter().enumerate() {
            let hi = t.slice(h, 0, i, i + 1)?;
            let hi = t.reshape(hi, [ch, s])?;
            let hi = t.transpose(hi)?;
            let q = self.q.forward(t, b, hi)?;
            let k = self.k.forward(t, b, c)?;
            let v = self.v.forward(t, b, c)?;
            let (d, l) = (t.value(q).shape()[1], t.value(k).shape()[0]);
            let q = t.reshape(q, [1, s, d])?;
            let k = t.reshape(k, [1, l, d])?;
            let v = t.reshape(v, [1, l, d])?;
            let a = t.attention(q, k, v)?;
            let a = t.reshape(a, [s, d])?;
            let o = self.o.forward(t, b, a)?;
            let o = t.transpose(o)?;
            let mut one = shape.clone();
            one[0] = 1;
            outs.push(t.reshape(o, one)?);
        }
        let delta = if outs.len() == 1 { outs[0] } else { t.concat(&outs, 0)? };
        Ok(t.add(x, delta)?)
    }
}

/// Toy 3D U-Net: three stride-2 stages (`n -> n/8`), timestep embedding in
/// every block, cross-attention at `n/4` and `n/8`, additive skips and a
/// zero-initialised output conv.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub params: ParamStore,
    pub config: DenoiserConfig,
    time: Linear,
    stem: TBlock,
    down1: TBlock,
    down2: TBlock,
    down3: TBlock,
    mid: TBlock,
    up2: UpConv,
    fuse2: TBlock,
    up1: UpConv,
    fuse1: TBlock,
    up0: UpConv,
    fuse0: TBlock,
    attn_down: CrossAttn,
    attn_mid: CrossAttn,
    attn_up: CrossAttn,
    out: Conv,
}

impl Denoiser {
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let DenoiserConfig { n, channels: c, width1: w1, width2: w2, attn_dim: d, time_dim } = *config;
        if n < 8 || n % 8 != 0 {
            return Err(invalid("n", format!("{n} is not a positive multiple of 8")));
        }
        if c == 0 || w1 == 0 || w2 == 0 || d == 0 || time_dim < 2 || time_dim % 2 != 0 {
            return Err(invalid("denoiser", format!("bad widths in {config:?}")));
        }
        let mut rng = seeded(seed);
        let r = &mut rng;
        let mut p = ParamStore::new();
        let s = &mut p;
        let den = Denoiser {
            time: Linear::new(s, "time", time_dim, TIME_HIDDEN, r),
            stem: TBlock::new(s, "stem", c, w1, 1, r),
            down1: TBlock::new(s, "down1", w1, w2, 2, r),
            down2: TBlock::new(s, "down2", w2, w2, 2, r),
            down3: TBlock::new(s, "down3", w2, w2, 2, r),
            mid: TBlock::new(s, "mid", w2, w2, 1, r),
            up2: UpConv::new(s, "up2", w2, w2, r),
            fuse2: TBlock::new(s, "fuse2", w2, w2, 1, r),
            up1: UpConv::new(s, "up1", w2, w2, r),
            fuse1: TBlock::new(s, "fuse1", w2, w2, 1, r),
            up0: UpConv::new(s, "up0", w2, w1, r),
            fuse0: TBlock::new(s, "fuse0", w1, w1, 1, r),
            attn_down: CrossAttn::new(s, "attn_down", w2, d, r),
            attn_mid: CrossAttn::new(s, "attn_mid", w2, d, r),
            attn_up: CrossAttn::new(s, "attn_up", w2, d, r),
            out: Conv::zeroed(s, "out", w1, c, 3, ConvSpec::new(1, 1), 3),
            params: ParamStore::new(),
            config: config.clone(),
        };
        Ok(Denoiser { params: p, ..den })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(checkpoint::save(path, &self.params)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>, config: &DenoiserConfig) -> Result<Self> {
        let mut d = Denoiser::new(config, 0)?;
        d.params.load_from(&checkpoint::load(path)?)?;
        Ok(d)
    }
}

impl Denoise for Denoiser {
    fn forward<T: Element>(&self, t: &mut Tape<T>, b: &Bound, x: Var, steps: &[usize], conds: &[&Condition]) -> Result<Var> {
        let cfg = &self.config;
        let s = t.value(x).shape().to_vec();
        let batch = s.first().copied().unwrap_or(0);
        if s.len() != 5 || s[1] != cfg.channels || s[2..] != [cfg.n; 3] {
            return Err(invalid("x_t", format!("expected [B, {}, {n}, {n}, {n}], got {s:?}", cfg.channels, n = cfg.n)));
        }
        if steps.len() != batch || conds.len() != batch {
            return Err(invalid("batch", format!("{batch} volumes, {} steps, {} conditions", steps.len(), conds.len())));
        }
        let tf = t.constant(timestep_features(steps, cfg.time_dim).cast());
        let hidden = self.time.forward(t, b, tf)?;
        let hidden = t.relu(hidden)?;
        let cv: Vec<Var> = conds.iter().map(|c| t.constant(c.embedding.cast())).collect();

        let e0 = self.stem.forward(t, b, x, hidden)?;
        let e1 = self.down1.forward(t, b, e0, hidden)?;
        let e2 = self.down2.forward(t, b, e1, hidden)?;
        let e2 = self.attn_down.forward(t, b, e2, &cv)?;
        let m = self.down3.forward(t, b, e2, hidden)?;
        let m = self.attn_mid.forward(t, b, m, &cv)?;
        let m = self.mid.forward(t, b, m, hidden)?;
        let u2 = self.up2.forward(t, b, m)?;
        let u2 = t.add(u2, e2)?;
        let u2 = self.fuse2.forward(t, b, u2, hidden)?;
        let u2 = self.attn_up.forward(t, b, u2, &cv)?;
        let u1 = self.up1.forward(t, b, u2)?;
        let u1 = t.add(u1, e1)?;
        let u1 = self.fuse1.forward(t, b, u1, hidden)?;
        let u0 = self.up0.forward(t, b, u1)?;
        let u0 = t.add(u0, e0)?;
        let u0 = self.fuse0.forward(t, b, u0, hidden)?;
        self.out.forward(t, b, u0)
    }
}

fn stack(vols: &[&[f32]], c: usize, n: usize) -> Result<Tensor<f32>> {
    let data: Vec<f32> = vols.iter().flat_map(|v| v.iter().copied()).collect();
    Ok(Tensor::new([vols.len(), c, n, n, n], data)?)
}

/// Loss of one batch: `x_t` is formed off-tape from `x0`, `noise` and the
/// per-item `gammas`; the target is `x0` or the noise.
#[allow(clippy::too_many_arguments)]
pub fn denoise_loss<T: Element, D: Denoise>(
    t: &mut Tape<T>,
    b: &Bound,
    den: &D,
    x0: &Tensor<f32>,
    noise: &Tensor<f32>,
    gammas: &[f64],
    steps: &[usize],
    conds: &[&Condition],
    prediction: Prediction,
) -> Result<Var> {
    if x0.shape() != noise.shape() || x0.shape().first() != Some(&gammas.len()) {
        return Err(invalid("batch", format!("x0 {:?}, noise {:?}, {} gammas", x0.shape(), noise.shape(), gammas.len())));
    }
    let per = x0.len() / gammas.len();
    let mut xt = Vec::with_capacity(x0.len());
    for (i, &g) in gammas.iter().enumerate() {
        xt.extend(q_sample_gamma(&x0.data()[i * per..(i + 1) * per], g, &noise.data()[i * per..(i + 1) * per])?);
    }
    let xt = t.constant(Tensor::new(x0.shape().to_vec(), xt)?.cast());
    let out = den.forward(t, b, xt, steps, conds)?;
    let target = t.constant(match prediction {
        Prediction::X0 => x0.cast(),
        Prediction::Epsilon => noise.cast(),
    });
    Ok(t.mse(out, target)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub volume: FeatureVolume,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub alpha: f64,
    pub prediction: Prediction,
    /// Probability of replacing a caption by the unconditional embedding.
    pub p_uncond: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig::default(),
            alpha: 0.5,
            prediction: Prediction::X0,
            p_uncond: 0.1,
            lr: 1e-5,
            weight_decay: 2e-3,
            steps: 1000,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(invalid("p_uncond", format!("{} outside [0, 1]", self.p_uncond)));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(invalid("optimizer", format!("lr {}, weight decay {}", self.lr, self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::new(self.lr) }
    }
}

/// Mutable optimisation state of a denoiser.
pub struct Trainer {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub config: DiffusionTrainConfig,
    state: AdamState<f32>,
    rng: ChaCha8Rng,
    uncond: Condition,
}

impl Trainer {
    pub fn new(config: &DiffusionTrainConfig) -> Result<Self> {
        config.validate()?;
        let denoiser = Denoiser::new(&config.denoiser, derive_seed(config.seed, 1))?;
        Ok(Trainer {
            state: AdamState::new(&denoiser.params),
            schedule: build_schedule(&config.schedule)?,
            rng: seeded(derive_seed(config.seed, 2)),
            config: config.clone(),
            denoiser,
            uncond: Condition::unconditional(),
        })
    }

    /// One Adam step on `batch`: `t ~ U{1..T}` and low-frequency noise per
    /// item, captions dropped with probability `p_uncond`. Returns the loss.
    pub fn train_step(&mut self, batch: &[(&FeatureVolume, &Condition)]) -> Result<f64> {
        let cfg = &self.config.denoiser;
        if batch.is_empty() {
            return Err(CoreError::Empty("training batch"));
        }
        if let Some((v, _)) = batch.iter().find(|(v, _)| v.n() != cfg.n || v.c() != cfg.channels) {
            return Err(invalid("volume", format!("c = {}, n = {} does not match the denoiser", v.c(), v.n())));
        }
        let m = cfg.n * cfg.n * cfg.n;
        let mut steps = Vec::with_capacity(batch.len());
        let mut noise = Vec::with_capacity(batch.len() * cfg.channels * m);
        let mut conds = Vec::with_capacity(batch.len());
        for (_, c) in batch {
            steps.push(self.rng.random_range(1..=self.schedule.steps()));
            noise.extend(sample_lowfreq_noise(cfg.channels, m, self.config.alpha, &mut self.rng)?);
            let drop = self.rng.random::<f64>() < self.config.p_uncond;
            conds.push(if drop { &self.uncond } else { *c });
        }
        let gammas: Vec<f64> = steps.iter().map(|&s| self.schedule.gamma(s)).collect();
        let x0 = stack(&batch.iter().map(|(v, _)| v.data()).collect::<Vec<_>>(), cfg.channels, cfg.n)?;
        let noise = Tensor::new(x0.shape().to_vec(), noise)?;
        let mut t = Tape::<f32>::new();
        let b = self.denoiser.params.bind(&mut t, true);
        let loss = denoise_loss(&mut t, &b, &self.denoiser, &x0, &noise, &gammas, &steps, &conds, self.config.prediction)?;
        let value = t.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(invalid("training", "non-finite loss"));
        }
        let g = b.grads(&t.backward(loss)?, &self.denoiser.params);
        adam_step_store(&mut self.denoiser.params, &g, &mut self.state, &self.config.adam())?;
        Ok(value)
    }
}

/// Trains on `items`, drawing `batch_size` items per step (the whole set in
/// order when it is no larger). Returns the trainer and per-step losses.
pub fn train_diffusion(items: &[TrainItem], cfg: &DiffusionTrainConfig, mut on_step: impl FnMut(usize, f64)) -> Result<(Trainer, Vec<f64>)> {
    if items.is_empty() {
        return Err(CoreError::Empty("diffusion training set"));
    }
    let mut trainer = Trainer::new(cfg)?;
    let conds: Vec<Condition> = items.iter().map(|i| Condition::from_caption(&i.caption)).collect();
    let mut pick = seeded(derive_seed(cfg.seed, 3));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = if items.len() <= cfg.batch_size {
            (0..items.len()).collect()
        } else {
            (0..cfg.batch_size).map(|_| pick.random_range(0..items.len())).collect()
        };
        let batch: Vec<(&FeatureVolume, &Condition)> = idx.iter().map(|&i| (&items[i].volume, &conds[i])).collect();
        let loss = trainer.train_step(&batch)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok((trainer, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub alpha: f64,
    pub guidance_scale: f64,
    pub prediction: Prediction,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { alpha: 0.5, guidance_scale: 1.0, prediction: Prediction::X0 }
    }
}

/// Predicted `x0` for a batch, with classifier-free guidance when
/// `guidance_scale != 1` (the conditional path alone otherwise).
pub fn predict_x0<D: Denoise>(
    den: &D,
    params: &ParamStore,
    xt: &Tensor<f32>,
    step: usize,
    gamma: f64,
    conds: &[&Condition],
    cfg: &SampleConfig,
) -> Result<Tensor<f32>> {
    let batch = conds.len();
    let guided = cfg.guidance_scale != 1.0;
    let uncond = Condition::unconditional();
    let mut all: Vec<&Condition> = conds.to_vec();
    let input = if guided {
        all.extend(std::iter::repeat_n(&uncond, batch));
        let mut d = xt.data().to_vec();
        d.extend_from_slice(xt.data());
        let mut s = xt.shape().to_vec();
        s[0] *= 2;
        Tensor::new(s, d)?
    } else {
        xt.clone()
    };
    let mut t = Tape::<f32>::new();
    let b = params.bind(&mut t, false);
    let x = t.constant(input);
    let y = den.forward(&mut t, &b, x, &vec![step; all.len()], &all)?;
    let raw = t.value(y).data();
    let half = xt.len();
    let out: Vec<f32> = if guided {
        let w = cfg.guidance_scale;
        (0..half).map(|i| (raw[half + i] as f64 + w * (raw[i] as f64 - raw[half + i] as f64)) as f32).collect()
    } else {
        raw.to_vec()
    };
    let out = match cfg.prediction {
        Prediction::X0 => out,
        Prediction::Epsilon => {
            let (a, s) = (gamma.sqrt(), (1.0 - gamma).sqrt());
            xt.data().iter().zip(&out).map(|(&x, &e)| ((x as f64 - s * e as f64) / a) as f32).collect()
        }
    };
    Ok(Tensor::new(xt.shape().to_vec(), out)?)
}

/// Ancestral sampling of one volume per `(condition, seed)` pair, batched
/// through the network. Item `i` draws all of its noise from
/// `seeded(seeds[i])`.
pub fn ddpm_sample<D: Denoise>(
    den: &D,
    params: &ParamStore,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    conds: &[&Condition],
    seeds: &[u64],
    cfg: &SampleConfig,
) -> Result<Vec<FeatureVolume>> {
    let (c, n) = shape;
    if conds.is_empty() || conds.len() != seeds.len() {
        return Err(invalid("sample batch", format!("{} conditions, {} seeds", conds.len(), seeds.len())));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(invalid("alpha", format!("{} outside [0, 1]", cfg.alpha)));
    }
    let m = n * n * n;
    let per = c * m;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| seeded(s)).collect();
    let mut x = Vec::with_capacity(conds.len() * per);
    for r in &mut rngs {
        x.extend(sample_lowfreq_noise(c, m, cfg.alpha, r)?);
    }
    let shape5 = [conds.len(), c, n, n, n];
    for step in (1..=schedule.steps()).rev() {
        let xt = Tensor::new(shape5, x)?;
        let x0 = predict_x0(den, params, &xt, step, schedule.gamma(step), conds, cfg)?;
        if step == 1 {
            x = x0.into_data();
            break;
        }
        let (c0, ct, var) = posterior_coefficients(schedule, step);
        let sd = var.sqrt();
        let mut next = Vec::with_capacity(xt.len());
        for (i, r) in rngs.iter_mut().enumerate() {
            let z = sample_lowfreq_noise(c, m, cfg.alpha, r)?;
            let (a, b) = (&x0.data()[i * per..(i + 1) * per], &xt.data()[i * per..(i + 1) * per]);
            next.extend((0..per).map(|j| (c0 * a[j] as f64 + ct * b[j] as f64 + sd * z[j] as f64) as f32));
        }
        x = next;
    }
    x.chunks(per).map(|v| FeatureVolume::new(n, c, v.to_vec())).collect()
}

/// Index of the reference volume with the smallest MSE to `v`.
pub fn nearest_volume(v: &FeatureVolume, refs: &[FeatureVolume]) -> Result<usize> {
    let mut best = None;
    for (i, r) in refs.iter().enumerate() {
        let e = v.mse(r)?;
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    best.map(|(i, _)| i).ok_or(CoreError::Empty("no reference volumes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_constant_beta_products() {
        let spec = ScheduleSpec { steps: 5, beta_start: 0.1, beta_end: 0.1, ..Default::default() };
        let s = build_schedule(&spec).unwrap();
        let expect = [0.9, 0.81, 0.729, 0.6561, 0.59049];
        for (t, e) in expect.iter().enumerate() {
            assert!((s.gamma(t + 1) - e).abs() < 1e-12);
        }
        assert_eq!(s.gamma(0), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(&ScheduleSpec { steps: 1, beta_start: 0.2, beta_end: 0.2, ..Default::default() }).unwrap();
        assert_eq!(s.gamma(1), 1.0 - 0.2);
    }

    #[test]
    fn larger_final_beta_lowers_final_gamma() {
        let hi = build_schedule(&ScheduleSpec::default()).unwrap();
        let lo = build_schedule(&ScheduleSpec { beta_end: 0.012, ..Default::default() }).unwrap();
        assert!(hi.gamma(1000) < lo.gamma(1000));
        assert!(hi.snr(1000) < lo.snr(1000));
    }

    #[test]
    fn every_kind_is_valid_and_snr_decreases() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::Sigmoid] {
            let s = build_schedule(&ScheduleSpec { kind, ..Default::default() }).unwrap();
            assert_eq!(s.steps(), 1000);
            for t in 1..=1000 {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0, "{kind:?} t={t}");
                assert!(s.gamma(t) < s.gamma(t - 1), "{kind:?} t={t}");
                if t > 1 {
                    assert!(s.snr(t) < s.snr(t - 1), "{kind:?} t={t}");
                }
            }
        }
    }

    #[test]
    fn schedule_errors() {
        let bad = |spec: ScheduleSpec| build_schedule(&spec).is_err();
        assert!(bad(ScheduleSpec { steps: 0, ..Default::default() }));
        assert!(bad(ScheduleSpec { beta_start: 0.0, ..Default::default() }));
        assert!(bad(ScheduleSpec { beta_start: 0.05, beta_end: 0.01, ..Default::default() }));
        assert!(bad(ScheduleSpec { beta_end: 1.0, ..Default::default() }));
        assert!(bad(ScheduleSpec { kind: ScheduleKind::Sigmoid, sigmoid_tau: 0.0, ..Default::default() }));
        assert!(bad(ScheduleSpec { kind: ScheduleKind::Cosine, cosine_offset: -1.0, ..Default::default() }));
    }

    #[test]
    fn snr_cases() {
        assert_eq!(snr_of(0.5), 1.0);
        assert_eq!(snr_of(1.0), SNR_CAP);
        assert_eq!(snr_of(1.0 - 1e-15), SNR_CAP);
        assert_eq!(snr_of(0.0), 0.0);
    }

    #[test]
    fn lowfreq_extremes() {
        let mut r = seeded(1);
        let v = sample_lowfreq_noise(3, 50, 1.0, &mut r).unwrap();
        for ch in v.chunks(50) {
            assert!(ch.iter().all(|&x| x == ch[0]));
        }
        assert_ne!(v[0], v[50]);
        assert!(sample_lowfreq_noise(1, 4, 1.5, &mut r).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let x0 = [0.3f32, -1.0, 2.0];
        let e = [1.0f32, 0.5, -0.25];
        assert_eq!(q_sample_gamma(&x0, 1.0, &e).unwrap(), x0);
        assert_eq!(q_sample_gamma(&x0, 0.0, &e).unwrap(), e);
        assert_eq!(q_sample_gamma(&[0.0; 3], 0.75, &e).unwrap(), [0.5, 0.25, -0.125]);
        assert!(q_sample_gamma(&x0, 0.5, &e[..2]).is_err());
    }

    #[test]
    fn posterior_at_first_step_is_x0() {
        let s = build_schedule(&ScheduleSpec::default()).unwrap();
        let (c0, ct, var) = posterior_coefficients(&s, 1);
        assert!((c0 - 1.0).abs() < 1e-9 && ct == 0.0 && var == 0.0);
        // the posterior variance is below beta_t for later steps
        let (_, _, v) = posterior_coefficients(&s, 500);
        assert!(v > 0.0 && v < s.beta(500));
    }

    #[test]
    fn fingerprint_tracks_betas() {
        let a = build_schedule(&ScheduleSpec::default()).unwrap();
        let b = build_schedule(&ScheduleSpec { beta_end: 0.012, ..Default::default() }).unwrap();
        assert_eq!(a.fingerprint(), build_schedule(&ScheduleSpec::default()).unwrap().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
