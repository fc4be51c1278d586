use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voldiff_autodiff::gradcheck::{gradcheck, gradcheck_op};
use voldiff_autodiff::{ConvSpec, GatherPlan, OpKind, SamplePoints, Tape, Tensor};

const EPS: f64 = 1e-4;
const LINEAR_TOL: f64 = 1e-6;
const NONLINEAR_TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn output_shape(kind: &OpKind, inputs: &[Tensor<f64>]) -> Vec<usize> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = tape.apply(kind.clone(), &vars).expect("forward");
    tape.value(out).shape().to_vec()
}

fn check(kind: OpKind, inputs: Vec<Tensor<f64>>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = rand_tensor(&mut rng, &output_shape(&kind, &inputs));
    let tol = if kind.is_linear() { LINEAR_TOL } else { NONLINEAR_TOL };
    let report = gradcheck_op(&kind, &inputs, &weights, EPS).unwrap();
    for (i, (&e, &m)) in report.rel_err.iter().zip(&report.max_abs_numeric).enumerate() {
        assert!(m > 0.0, "{kind}: input {i} has an identically zero numeric gradient");
        assert!(e < tol, "{kind}: input {i} relative error {e:e} >= {tol:e}");
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
        check(kind.clone(), vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])], 1);
        check(kind, vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[1, 3, 1])], 2);
    }
}

#[test]
fn scale_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(OpKind::Scale(-2.5), vec![rand_tensor(&mut rng, &[5])], 3);
    check(OpKind::Sum(None), vec![rand_tensor(&mut rng, &[2, 3])], 4);
    check(OpKind::Sum(Some(1)), vec![rand_tensor(&mut rng, &[2, 3, 4])], 5);
    check(OpKind::Mean, vec![rand_tensor(&mut rng, &[2, 3])], 6);
}

#[test]
fn matmul_plain_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(OpKind::MatMul, vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])], 7);
    check(OpKind::MatMul, vec![rand_tensor(&mut rng, &[2, 3, 5]), rand_tensor(&mut rng, &[2, 5, 4])], 8);
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(
        OpKind::Conv2d(ConvSpec::new(1, 2)),
        vec![rand_tensor(&mut rng, &[1, 2, 6, 5]), rand_tensor(&mut rng, &[3, 2, 5, 5])],
        9,
    );
    check(
        OpKind::Conv3d(ConvSpec::new(1, 1)),
        vec![rand_tensor(&mut rng, &[1, 2, 4, 4, 4]), rand_tensor(&mut rng, &[3, 2, 3, 3, 3])],
        10,
    );
    check(
        OpKind::Conv3d(ConvSpec::new(2, 1)),
        vec![rand_tensor(&mut rng, &[2, 2, 4, 4, 4]), rand_tensor(&mut rng, &[2, 2, 3, 3, 3])],
        11,
    );
    check(
        OpKind::TransposedConv3d(ConvSpec::new(2, 0)),
        vec![rand_tensor(&mut rng, &[1, 3, 2, 2, 2]), rand_tensor(&mut rng, &[3, 2, 2, 2, 2])],
        12,
    );
}

#[test]
fn pointwise_nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(OpKind::Relu, vec![away_from_zero(&mut rng, &[4, 5], 0.01)], 13);
    check(OpKind::Softplus, vec![rand_tensor(&mut rng, &[4, 5]).map(|v| 4.0 * v)], 14);
    check(OpKind::Sigmoid, vec![rand_tensor(&mut rng, &[4, 5]).map(|v| 4.0 * v)], 15);
    check(OpKind::Exp, vec![rand_tensor(&mut rng, &[4, 5])], 16);
    check(OpKind::Softmax, vec![rand_tensor(&mut rng, &[3, 6])], 17);
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(OpKind::Concat(1), vec![rand_tensor(&mut rng, &[2, 1, 3]), rand_tensor(&mut rng, &[2, 3, 3])], 18);
    check(OpKind::Slice { axis: 1, start: 1, end: 3 }, vec![rand_tensor(&mut rng, &[2, 4, 3])], 19);
    check(OpKind::Reshape(vec![6, 4]), vec![rand_tensor(&mut rng, &[2, 3, 4])], 20);
    check(OpKind::Transpose, vec![rand_tensor(&mut rng, &[2, 3, 4])], 21);
}

#[test]
fn group_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(
        OpKind::GroupNorm { groups: 2, eps: 1e-5 },
        vec![rand_tensor(&mut rng, &[2, 4, 3, 2]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])],
        22,
    );
}

#[test]
fn scaled_dot_attention_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check(
        OpKind::ScaledDotAttention,
        vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 5, 4]), rand_tensor(&mut rng, &[2, 5, 3])],
        23,
    );
}

#[test]
fn resampling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<[f64; 3]> = (0..20)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    check(OpKind::TrilinearSample(Arc::new(SamplePoints(pts))), vec![rand_tensor(&mut rng, &[2, 3, 4, 5])], 24);
    check(OpKind::UpsampleTrilinear(2), vec![rand_tensor(&mut rng, &[1, 2, 3, 3, 3])], 25);
    let rows: Vec<Vec<(u32, f64)>> = (0..7)
        .map(|_| (0..3).map(|_| (rng.random_range(0..12u32), rng.random_range(0.0..1.0))).collect())
        .collect();
    check(OpKind::SparseGather(GatherPlan::from_rows(&rows, 12)), vec![rand_tensor(&mut rng, &[3, 2, 4])], 26);
}

#[test]
fn composite_graph_with_fan_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 4])];
    let weights = rand_tensor(&mut rng, &[3, 4]);
    let report = gradcheck(&inputs, &weights, EPS, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let s = t.sigmoid(h)?;
        let g = t.mul(s, v[0])?;
        t.add(g, h)
    })
    .unwrap();
    assert!(report.worst() < NONLINEAR_TOL, "{:?}", report.rel_err);
}
