use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voldiff_autodiff::gradcheck::gradcheck;
use voldiff_autodiff::{Tape, Tensor};
use voldiff_core::geometry::{Ray, Vec3};
use voldiff_core::renderer::{render_rays_var, Decoder, DecoderMlp, RenderConfig};

fn rays(rng: &mut ChaCha8Rng, count: usize) -> Vec<Ray> {
    (0..count)
        .map(|_| {
            let o = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 3.0);
            let target = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
            Ray::new(o, target - o)
        })
        .collect()
}

#[test]
fn image_loss_gradient_reaches_volume_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, c) = (4, 4);
    let volume = Tensor::from_fn([1, c, n, n, n], |_| rng.random_range(-0.5..0.5));
    let decoder = DecoderMlp::new(c, 3);
    let params = decoder.params().cast::<f64>();
    let rays = rays(&mut rng, 6);
    let streams: Vec<u64> = (0..rays.len() as u64).collect();
    let target = Tensor::from_fn([rays.len(), 3], |_| rng.random_range(0.0..1.0));
    let cfg = RenderConfig { samples_per_ray: 12, jitter: false, ..Default::default() };
    let loss = |t: &mut Tape<f64>, v: &[voldiff_autodiff::Var]| {
        let b = params.bind(t, false);
        let img = render_rays_var(t, v[0], &decoder, &b, &rays, &streams, &cfg).map_err(|e| match e {
            voldiff_core::CoreError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        let tv = t.constant(target.clone());
        t.mse(img, tv)
    };
    let mut probe = Tape::new();
    let x = probe.constant(volume.clone());
    let shape = loss(&mut probe, &[x]).map(|l| probe.value(l).shape().to_vec()).unwrap();
    let report = gradcheck(&[volume], &Tensor::ones(shape), 1e-5, loss).unwrap();
    assert!(report.max_abs_numeric[0] > 1e-6, "{report:?}");
    assert!(report.worst() < 1e-3, "{report:?}");
}
