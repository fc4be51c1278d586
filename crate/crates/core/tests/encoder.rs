use voldiff_autodiff::{ConvSpec, Tape, Tensor};
use voldiff_core::dataset::{synthesize, MultiViewSet};
use voldiff_core::encoder::*;
use voldiff_core::renderer::{render_ray_field, NeuralField, RenderConfig};
use voldiff_core::scene::scene_gen;

fn small_set(seed: u64, views: usize, size: usize) -> MultiViewSet {
    let scene = &scene_gen(seed, 1, 1).unwrap()[0];
    let rc = RenderConfig { samples_per_ray: 32, jitter: false, ..Default::default() };
    synthesize(scene, views, size, size, seed, &rc).unwrap()
}

fn small_config() -> EncoderTrainConfig {
    EncoderTrainConfig {
        n: 8,
        channels: 4,
        input_views: 6,
        supervision_views: 2,
        pixels_per_view: 64,
        samples_per_ray: 16,
        steps: 1,
        lr_encoder: 1e-3,
        lr_decoder: 1e-3,
        eval_every: 0,
        eval_pixels: 64,
        ..Default::default()
    }
}

#[test]
fn ones_kernel_reproduces_its_footprint_on_a_delta() {
    let mut img = Tensor::<f64>::zeros([1, 1, 9, 9]);
    img.data_mut()[4 * 9 + 4] = 1.0;
    let mut t = Tape::<f64>::new();
    let x = t.constant(img);
    let w = t.constant(Tensor::ones([1, 1, 5, 5]));
    let y = t.conv2d(x, w, ConvSpec::new(1, 2)).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[1, 1, 9, 9]);
    for r in 0..9 {
        for c in 0..9 {
            let inside = (2..=6).contains(&r) && (2..=6).contains(&c);
            assert_eq!(out.data()[r * 9 + c], if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn extractor_keeps_spatial_size() {
    let enc = Encoder::new(8, 4, 0).unwrap();
    let set = small_set(1, 2, 64);
    let mut t = Tape::<f32>::new();
    let b = enc.params.bind(&mut t, false);
    let x = t.constant(images_tensor(&set).unwrap());
    let y = enc.extractor.forward(&mut t, &b, x).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 4, 64, 64]);
}

#[test]
fn view_order_does_not_change_coarse_volume() {
    let set = small_set(2, 5, 24);
    let cfg = UnprojectConfig::for_resolution(8);
    let feats = Tensor::from_fn([5, 3, 24, 24], |i| ((i * 7919) % 251) as f32 / 251.0);
    let a = unproject(&feats, &set, 8, &cfg).unwrap();
    let order = [3, 0, 4, 2, 1];
    let perm = set.subset(&order);
    let plane = 3 * 24 * 24;
    let pf = Tensor::from_fn([5, 3, 24, 24], |i| feats.data()[order[i / plane] * plane + i % plane]);
    let b = unproject(&pf, &perm, 8, &cfg).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn voxel_features_are_convex_combinations() {
    let set = small_set(3, 4, 24);
    let vals = [-2.0f32, 0.5, 1.5, 4.0];
    let feats = constant_features(4, 1, 24, 24, |v, _| vals[v]);
    let vol = unproject(&feats, &set, 8, &UnprojectConfig::for_resolution(8)).unwrap();
    let mut seen = 0;
    for &x in vol.data() {
        if x != 0.0 {
            seen += 1;
            assert!((-2.0 - 1e-5..=4.0 + 1e-5).contains(&x), "{x}");
        }
    }
    assert!(seen > 0);
}

#[test]
fn tape_coarse_volume_matches_direct_unprojection() {
    let enc = Encoder::new(8, 4, 5).unwrap();
    let set = small_set(4, 3, 20);
    let coarse = enc.encode_with(&set, false).unwrap();
    let mut t = Tape::<f32>::new();
    let b = enc.params.bind(&mut t, false);
    let x = t.constant(images_tensor(&set).unwrap());
    let f = enc.extractor.forward(&mut t, &b, x).unwrap();
    let direct = unproject(t.value(f), &set, 8, &enc.unproject).unwrap();
    assert_eq!(coarse, direct);
    // zero-initialised output conv: refinement starts as the identity
    assert_eq!(enc.encode(&set).unwrap(), coarse);
}

#[test]
fn step_zero_loss_matches_scalar_render() {
    let sets = vec![small_set(5, 7, 16), small_set(6, 7, 16)];
    let cfg = small_config();
    let out = train_encoder(&sets, &cfg, None, |_| {}).unwrap();
    let scenes: Vec<TrainScene> = sets.iter().map(|s| TrainScene::split(s, cfg.input_views).unwrap()).collect();
    let (enc, dec) = initial_models(&cfg).unwrap();
    let batch = draw_batch(&mut batch_rng(&cfg), &scenes, &cfg);
    let scene = &scenes[batch.scene];
    let vol = enc.encode(&scene.inputs).unwrap();
    let field = NeuralField { volume: &vol, decoder: &dec };
    let rcfg = cfg.step_render(0);
    let rays = batch.rays(scene);
    let streams = batch.streams(scene);
    let target = batch.targets(scene);
    let mut se = 0.0;
    for (i, (ray, s)) in rays.iter().zip(&streams).enumerate() {
        let c = render_ray_field(&field, ray, &rcfg, *s).rgb;
        for j in 0..3 {
            se += (c[j] as f64 - target[3 * i + j] as f64).powi(2);
        }
    }
    let expect = se / (3 * rays.len()) as f64;
    assert!((out.log[0].loss - expect).abs() < 1e-5 * expect.max(1e-3), "{} vs {expect}", out.log[0].loss);
}

#[test]
fn single_scene_overfit_reduces_loss() {
    let sets = vec![small_set(8, 9, 24)];
    let cfg = EncoderTrainConfig {
        input_views: 8,
        pixels_per_view: 128,
        steps: 250,
        lr_encoder: 3e-3,
        lr_decoder: 3e-3,
        ..small_config()
    };
    let out = train_encoder(&sets, &cfg, None, |_| {}).unwrap();
    let first = out.log[0].loss;
    let last: f64 = out.log[out.log.len() - 10..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "{first} -> {last}");
    assert!(out.final_heldout < out.initial_heldout);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let sets = vec![small_set(9, 7, 16)];
    let cfg = EncoderTrainConfig { steps: 3, ..small_config() };
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint_file(dir.path());
    let a = train_encoder(&sets, &cfg, Some(&path), |_| {}).unwrap();
    let b = train_encoder(&sets, &cfg, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    let (enc, dec) = load_checkpoint(&path, cfg.n, cfg.channels).unwrap();
    let scene = TrainScene::split(&sets[0], cfg.input_views).unwrap();
    assert_eq!(enc.encode(&scene.inputs).unwrap(), a.encoder.encode(&scene.inputs).unwrap());
    let pa = heldout_psnr(&a.encoder, &a.decoder, std::slice::from_ref(&scene), 6, 16).unwrap();
    let pb = heldout_psnr(&enc, &dec, std::slice::from_ref(&scene), 6, 16).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn empty_dataset_and_bad_views_are_rejected() {
    let cfg = small_config();
    assert!(train_encoder(&[], &cfg, None, |_| {}).is_err());
    let sets = vec![small_set(1, 6, 16)];
    assert!(train_encoder(&sets, &cfg, None, |_| {}).is_err());
    assert!(unproject(&Tensor::zeros([1, 4, 16, 16]), &MultiViewSet::default(), 8, &UnprojectConfig::for_resolution(8)).is_err());
}
