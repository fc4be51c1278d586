use voldiff_autodiff::{Bound, Element, Tape, Tensor, Var};
use voldiff_core::diffusion::*;
use voldiff_core::nn::seeded;
use voldiff_core::text::Condition;
use voldiff_core::volume::FeatureVolume;

struct Identity;

impl Denoise for Identity {
    fn forward<T: Element>(&self, _t: &mut Tape<T>, _b: &Bound, x: Var, _s: &[usize], _c: &[&Condition]) -> voldiff_core::Result<Var> {
        Ok(x)
    }
}

struct Zero;

impl Denoise for Zero {
    fn forward<T: Element>(&self, t: &mut Tape<T>, _b: &Bound, x: Var, _s: &[usize], _c: &[&Condition]) -> voldiff_core::Result<Var> {
        Ok(t.scale(x, 0.0)?)
    }
}

/// Always answers with a fixed volume, whatever the input.
struct Oracle(Tensor<f32>);

impl Denoise for Oracle {
    fn forward<T: Element>(&self, t: &mut Tape<T>, _b: &Bound, x: Var, _s: &[usize], _c: &[&Condition]) -> voldiff_core::Result<Var> {
        let batch = t.value(x).shape()[0];
        let mut data = Vec::new();
        for _ in 0..batch {
            data.extend(self.0.data().iter().copied());
        }
        let mut shape = self.0.shape().to_vec();
        shape[0] = batch;
        Ok(t.constant(Tensor::new(shape, data)?.cast()))
    }
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig { n: 8, channels: 2, width1: 8, width2: 8, attn_dim: 8, time_dim: 8 }
}

/// (mean, standard error) of a sample.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn lowfreq_noise_moments() {
    let (c, m, draws) = (2usize, 6usize, 100_000usize);
    for alpha in [0.0, 0.5, 1.0] {
        let mut rng = seeded(42);
        let (mut sq, mut cross, mut other, mut chan_mean_sq, mut first) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..draws {
            let e = sample_lowfreq_noise(c, m, alpha, &mut rng).unwrap();
            let e: Vec<f64> = e.iter().map(|&v| v as f64).collect();
            first.push(e[0]);
            sq.push(e[0] * e[0]);
            cross.push(e[0] * e[1]);
            other.push(e[0] * e[m]);
            let cm = e[..m].iter().sum::<f64>() / m as f64;
            chan_mean_sq.push(cm * cm);
        }
        let check = |name: &str, xs: &[f64], expect: f64, k: f64| {
            let (est, se) = mean_se(xs);
            let tol = k * se.max(1e-12);
            assert!((est - expect).abs() <= tol, "alpha {alpha} {name}: {est} vs {expect} (tol {tol})");
        };
        check("mean", &first, 0.0, 4.0);
        check("variance", &sq, 1.0, 4.0);
        check("same-channel covariance", &cross, alpha, 3.0);
        check("cross-channel covariance", &other, 0.0, 4.0);
        check("channel mean variance", &chan_mean_sq, alpha + (1.0 - alpha) / m as f64, 3.0);
    }
}

#[test]
fn identity_at_clean_level_has_zero_loss() {
    let x0 = Tensor::from_fn([2, 2, 8, 8, 8], |i| (i % 13) as f32 / 13.0);
    let noise = Tensor::from_fn([2, 2, 8, 8, 8], |i| ((i * 7) % 5) as f32 - 2.0);
    let mut t = Tape::<f64>::new();
    let b = voldiff_autodiff::ParamStore::<f64>::new().bind(&mut t, false);
    let u = Condition::unconditional();
    let loss = denoise_loss(&mut t, &b, &Identity, &x0, &noise, &[1.0, 1.0], &[1, 1], &[&u, &u], Prediction::X0).unwrap();
    assert_eq!(t.value(loss).item(), 0.0);
}

#[test]
fn zero_output_loss_is_second_moment() {
    let mut rng = seeded(3);
    let x0 = Tensor::new([4, 2, 8, 8, 8], sample_lowfreq_noise(8, 512, 0.0, &mut rng).unwrap()).unwrap();
    let noise = Tensor::new([4, 2, 8, 8, 8], sample_lowfreq_noise(8, 512, 0.5, &mut rng).unwrap()).unwrap();
    let mut t = Tape::<f64>::new();
    let b = voldiff_autodiff::ParamStore::<f64>::new().bind(&mut t, false);
    let u = Condition::unconditional();
    let loss = denoise_loss(&mut t, &b, &Zero, &x0, &noise, &[0.3; 4], &[5; 4], &[&u; 4], Prediction::X0).unwrap();
    // 4096 standard normals: E = 1, sd of the mean sqrt(2 / 4096)
    assert!((t.value(loss).item() - 1.0).abs() < 4.0 * (2.0f64 / 4096.0).sqrt());
}

#[test]
fn perfect_denoiser_posterior_at_first_step_returns_x0() {
    let x0 = FeatureVolume::from_fn(8, 2, |ch, p| (ch as f64 + p[0] * p[1] - 0.3 * p[2]) as f32);
    let sched = build_schedule(&ScheduleSpec { steps: 1, beta_start: 1e-4, beta_end: 1e-4, ..Default::default() }).unwrap();
    let mut rng = seeded(9);
    let noise = sample_lowfreq_noise(2, 512, 0.5, &mut rng).unwrap();
    let xt = q_sample(&x0, 1, &sched, &noise).unwrap();
    assert_ne!(xt, x0);
    let oracle = Oracle(x0.to_tensor());
    let u = Condition::from_caption("red sphere");
    let out = ddpm_sample(&oracle, &voldiff_autodiff::ParamStore::new(), &sched, (2, 8), &[&u], &[1], &SampleConfig::default()).unwrap();
    assert_eq!(out[0], x0);
}

#[test]
fn guidance_scale_one_is_the_conditional_path() {
    let den = Denoiser::new(&tiny(), 5).unwrap();
    let mut p = den.params.clone();
    // move the zero-initialised output layer so predictions are not trivial
    for t in p.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f32 - 3.0);
        }
    }
    let xt = Tensor::from_fn([1, 2, 8, 8, 8], |i| ((i * 31) % 19) as f32 / 19.0 - 0.5);
    let c = Condition::from_caption("blue cube");
    let cfg1 = SampleConfig { guidance_scale: 1.0, ..Default::default() };
    let got = predict_x0(&den, &p, &xt, 10, 0.5, &[&c], &cfg1).unwrap();
    let mut t = Tape::<f32>::new();
    let b = p.bind(&mut t, false);
    let x = t.constant(xt.clone());
    let direct = den.forward(&mut t, &b, x, &[10], &[&c]).unwrap();
    assert_eq!(&got, t.value(direct));

    let u = Condition::unconditional();
    let mut t2 = Tape::<f32>::new();
    let b2 = p.bind(&mut t2, false);
    let x2 = t2.constant(xt.clone());
    let un = den.forward(&mut t2, &b2, x2, &[10], &[&u]).unwrap();
    let guided = predict_x0(&den, &p, &xt, 10, 0.5, &[&c], &SampleConfig { guidance_scale: 3.0, ..Default::default() }).unwrap();
    for i in 0..xt.len() {
        let (cv, uv) = (t.value(direct).data()[i] as f64, t2.value(un).data()[i] as f64);
        assert!((guided.data()[i] as f64 - (uv + 3.0 * (cv - uv))).abs() < 1e-4);
    }
}

#[test]
fn denoiser_shapes_and_errors() {
    let den = Denoiser::new(&tiny(), 0).unwrap();
    let mut t = Tape::<f32>::new();
    let b = den.params.bind(&mut t, false);
    let c = Condition::from_caption("green torus");
    let x = t.constant(Tensor::zeros([2, 2, 8, 8, 8]));
    let y = den.forward(&mut t, &b, x, &[1, 500], &[&c, &c]).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 2, 8, 8, 8]);
    let bad = t.constant(Tensor::zeros([1, 3, 8, 8, 8]));
    assert!(den.forward(&mut t, &b, bad, &[1], &[&c]).is_err());
    assert!(den.forward(&mut t, &b, x, &[1], &[&c]).is_err());
    assert!(Denoiser::new(&DenoiserConfig { n: 12, ..tiny() }, 0).is_err());
}

fn toy_items() -> Vec<TrainItem> {
    vec![
        TrainItem { volume: FeatureVolume::from_fn(8, 2, |ch, p| (0.5 * p[0] + ch as f64 * 0.2) as f32), caption: "red sphere".into() },
        TrainItem { volume: FeatureVolume::from_fn(8, 2, |ch, p| (0.4 - 0.6 * p[1] * p[1] - ch as f64 * 0.1) as f32), caption: "blue cube".into() },
    ]
}

fn toy_config(steps: usize) -> DiffusionTrainConfig {
    DiffusionTrainConfig {
        schedule: ScheduleSpec { steps: 20, beta_start: 1e-3, beta_end: 0.2, ..Default::default() },
        denoiser: tiny(),
        lr: 3e-3,
        weight_decay: 0.0,
        steps,
        batch_size: 2,
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn training_loss_decreases() {
    let (_, losses) = train_diffusion(&toy_items(), &toy_config(150), |_, _| {}).unwrap();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn sampling_is_deterministic_and_batch_independent() {
    let (tr, _) = train_diffusion(&toy_items(), &toy_config(5), |_, _| {}).unwrap();
    let a = Condition::from_caption("red sphere");
    let b = Condition::from_caption("blue cube");
    let cfg = SampleConfig { guidance_scale: 2.0, ..Default::default() };
    let den = &tr.denoiser;
    let run = |conds: &[&Condition], seeds: &[u64]| ddpm_sample(den, &den.params, &tr.schedule, (2, 8), conds, seeds, &cfg).unwrap();
    let both = run(&[&a, &b], &[1, 2]);
    assert_eq!(both, run(&[&a, &b], &[1, 2]));
    let single = run(&[&b], &[2]);
    for (x, y) in both[1].data().iter().zip(single[0].data()) {
        assert!((x - y).abs() < 1e-5);
    }
    assert_ne!(run(&[&a], &[3])[0], both[0]);
}

#[test]
fn checkpoint_round_trip() {
    let (tr, _) = train_diffusion(&toy_items(), &toy_config(3), |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("den.vdcp");
    tr.denoiser.save(&path).unwrap();
    let back = Denoiser::load(&path, &tiny()).unwrap();
    let c = Condition::from_caption("red sphere");
    let s1 = ddpm_sample(&back, &back.params, &tr.schedule, (2, 8), &[&c], &[4], &SampleConfig::default()).unwrap();
    let s2 = ddpm_sample(&tr.denoiser, &tr.denoiser.params, &tr.schedule, (2, 8), &[&c], &[4], &SampleConfig::default()).unwrap();
    assert_eq!(s1, s2);
    assert!(Denoiser::load(&path, &DenoiserConfig { width1: 16, ..tiny() }).is_err());
}

#[test]
fn nearest_volume_picks_closest() {
    let items = toy_items();
    let refs: Vec<FeatureVolume> = items.iter().map(|i| i.volume.clone()).collect();
    let mut v = refs[1].clone();
    v.data_mut()[0] += 0.5;
    assert_eq!(nearest_volume(&v, &refs).unwrap(), 1);
    assert!(nearest_volume(&v, &[]).is_err());
}
