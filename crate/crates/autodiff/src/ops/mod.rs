//! The enumerated operation set and its forward/backward dispatch.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod sample;
pub mod shape;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use conv::ConvSpec;
pub use sample::{GatherPlan, SamplePoints};

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Conv2d(ConvSpec),
    Conv3d(ConvSpec),
    TransposedConv3d(ConvSpec),
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    /// Sum over one axis, or every element when `None`.
    Sum(Option<usize>),
    Mean,
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
    Transpose,
    GroupNorm { groups: usize, eps: f64 },
    Softmax,
    ScaledDotAttention,
    /// Differentiable w.r.t. the grid only; points are constants.
    TrilinearSample(Arc<SamplePoints>),
    UpsampleTrilinear(usize),
    SparseGather(Arc<GatherPlan>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::Conv3d(_) => "conv3d",
            OpKind::TransposedConv3d(_) => "transposed_conv3d",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Sum(_) => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::Softmax => "softmax",
            OpKind::ScaledDotAttention => "scaled_dot_attention",
            OpKind::TrilinearSample(_) => "trilinear_sample",
            OpKind::UpsampleTrilinear(_) => "upsample_trilinear",
            OpKind::SparseGather(_) => "sparse_gather",
        }
    }

    /// Expected input count; `None` means variadic (at least one).
    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
            OpKind::Conv2d(_) | OpKind::Conv3d(_) | OpKind::TransposedConv3d(_) => Some(2),
            OpKind::GroupNorm { .. } | OpKind::ScaledDotAttention => Some(3),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }

    /// True for ops whose output is linear in every input jointly or
    /// separately (used to pick gradient-check tolerances).
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            OpKind::Add
                | OpKind::Sub
                | OpKind::Scale(_)
                | OpKind::MatMul
                | OpKind::Mul
                | OpKind::Conv2d(_)
                | OpKind::Conv3d(_)
                | OpKind::TransposedConv3d(_)
                | OpKind::Sum(_)
                | OpKind::Mean
                | OpKind::Concat(_)
                | OpKind::Slice { .. }
                | OpKind::Reshape(_)
                | OpKind::Transpose
                | OpKind::TrilinearSample(_)
                | OpKind::UpsampleTrilinear(_)
                | OpKind::SparseGather(_)
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses attribute-free op names (and defaults for the rest where one is
/// unambiguous). Anything else is `UnsupportedOp`.
impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::MatMul,
            "conv2d" => OpKind::Conv2d(ConvSpec::default()),
            "conv3d" => OpKind::Conv3d(ConvSpec::default()),
            "transposed_conv3d" => OpKind::TransposedConv3d(ConvSpec::new(2, 0)),
            "relu" => OpKind::Relu,
            "softplus" => OpKind::Softplus,
            "sigmoid" => OpKind::Sigmoid,
            "exp" => OpKind::Exp,
            "sum" => OpKind::Sum(None),
            "mean" => OpKind::Mean,
            "transpose" => OpKind::Transpose,
            "softmax" => OpKind::Softmax,
            "scaled_dot_attention" => OpKind::ScaledDotAttention,
            "upsample_trilinear" => OpKind::UpsampleTrilinear(2),
            other => return Err(AutodiffError::UnsupportedOp(other.to_string())),
        })
    }
}

/// Extra forward state an op keeps for its backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Saved<T> {
    None,
    GroupStats(norm::GroupStats<T>),
    AttentionProbs(Vec<T>),
}

pub(crate) fn forward<T: Element>(kind: &OpKind, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    match kind.arity() {
        Some(n) if n != inputs.len() => {
            return Err(AutodiffError::Arity { op: kind.name(), expected: n, got: inputs.len() });
        }
        None if inputs.is_empty() => {
            return Err(AutodiffError::Arity { op: kind.name(), expected: 1, got: 0 });
        }
        _ => {}
    }
    let x = inputs[0];
    let plain = |t: Tensor<T>| Ok((t, Saved::None));
    match kind {
        OpKind::Add => plain(elementwise::binary("add", x, inputs[1], |a, b| a + b)?),
        OpKind::Sub => plain(elementwise::binary("sub", x, inputs[1], |a, b| a - b)?),
        OpKind::Mul => plain(elementwise::binary("mul", x, inputs[1], |a, b| a * b)?),
        OpKind::Scale(s) => {
            let s = T::from_f64c(*s);
            plain(x.map(|v| v * s))
        }
        OpKind::MatMul => plain(linalg::matmul_forward(x, inputs[1])?),
        OpKind::Conv2d(spec) => plain(conv::conv_forward("conv2d", x, inputs[1], *spec, 2)?),
        OpKind::Conv3d(spec) => plain(conv::conv_forward("conv3d", x, inputs[1], *spec, 3)?),
        OpKind::TransposedConv3d(spec) => plain(conv::transposed_forward(x, inputs[1], *spec)?),
        OpKind::Relu => plain(x.map(|v| v.max(T::zero()))),
        OpKind::Softplus => plain(x.map(elementwise::softplus)),
        OpKind::Sigmoid => plain(x.map(elementwise::sigmoid)),
        OpKind::Exp => plain(x.map(|v| v.exp())),
        OpKind::Sum(axis) => plain(shape::sum_forward(x, *axis)?),
        OpKind::Mean => plain(Tensor::scalar(x.sum() / T::from_f64c(x.len() as f64))),
        OpKind::Concat(axis) => plain(shape::concat_forward(inputs, *axis)?),
        OpKind::Slice { axis, start, end } => plain(shape::slice_forward(x, *axis, *start, *end)?),
        OpKind::Reshape(s) => plain(x.clone().reshape(s.clone())?),
        OpKind::Transpose => plain(shape::transpose_forward(x)?),
        OpKind::GroupNorm { groups, eps } => {
            let (y, stats) = norm::group_norm_forward(x, inputs[1], inputs[2], *groups, *eps)?;
            Ok((y, Saved::GroupStats(stats)))
        }
        OpKind::Softmax => plain(norm::softmax_forward(x)),
        OpKind::ScaledDotAttention => {
            let (y, p) = linalg::attention_forward(x, inputs[1], inputs[2])?;
            Ok((y, Saved::AttentionProbs(p)))
        }
        OpKind::TrilinearSample(points) => plain(sample::trilinear_forward(x, points)?),
        OpKind::UpsampleTrilinear(f) => plain(sample::upsample_forward(x, *f)?),
        OpKind::SparseGather(plan) => plain(sample::gather_forward(x, plan)?),
    }
}

/// Vector-Jacobian product: gradients for each input flagged in `need`.
pub(crate) fn backward<T: Element>(
    kind: &OpKind,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    grad: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let x = inputs[0];
    let one = |t: Tensor<T>| vec![Some(t)];
    let pointwise = |f: &dyn Fn(T, T, T) -> T| {
        let d = x.data().iter().zip(output.data()).zip(grad.data()).map(|((&xi, &yi), &g)| f(xi, yi, g)).collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
    };
    match kind {
        OpKind::Add => vec![
            need[0].then(|| elementwise::reduce_to(grad, x.shape())),
            need[1].then(|| elementwise::reduce_to(grad, inputs[1].shape())),
        ],
        OpKind::Sub => vec![
            need[0].then(|| elementwise::reduce_to(grad, x.shape())),
            need[1].then(|| elementwise::reduce_to(&grad.map(|g| -g), inputs[1].shape())),
        ],
        OpKind::Mul => vec![
            need[0].then(|| elementwise::mul_grad(grad, inputs[1], x.shape())),
            need[1].then(|| elementwise::mul_grad(grad, x, inputs[1].shape())),
        ],
        OpKind::Scale(s) => {
            let s = T::from_f64c(*s);
            one(grad.map(|g| g * s))
        }
        OpKind::MatMul => {
            let (a, b) = linalg::matmul_backward(x, inputs[1], grad, [need[0], need[1]]);
            vec![a, b]
        }
        OpKind::Conv2d(spec) => {
            let (a, b) = conv::conv_backward(x, inputs[1], grad, *spec, 2, [need[0], need[1]]);
            vec![a, b]
        }
        OpKind::Conv3d(spec) => {
            let (a, b) = conv::conv_backward(x, inputs[1], grad, *spec, 3, [need[0], need[1]]);
            vec![a, b]
        }
        OpKind::TransposedConv3d(spec) => {
            let (a, b) = conv::transposed_backward(x, inputs[1], grad, *spec, [need[0], need[1]]);
            vec![a, b]
        }
        OpKind::Relu => pointwise(&|xi, _, g| if xi > T::zero() { g } else { T::zero() }),
        OpKind::Softplus => pointwise(&|xi, _, g| g * elementwise::sigmoid(xi)),
        OpKind::Sigmoid => pointwise(&|_, yi, g| g * yi * (T::one() - yi)),
        OpKind::Exp => pointwise(&|_, yi, g| g * yi),
        OpKind::Sum(axis) => one(shape::sum_backward(x, *axis, grad)),
        OpKind::Mean => one(Tensor::full(x.shape().to_vec(), grad.item() / T::from_f64c(x.len() as f64))),
        OpKind::Concat(axis) => (0..inputs.len())
            .map(|i| need[i].then(|| shape::concat_backward(inputs, *axis, grad, i)))
            .collect(),
        OpKind::Slice { axis, start, end } => one(shape::slice_backward(x, *axis, *start, *end, grad)),
        OpKind::Reshape(_) => one(Tensor::from_parts(x.shape().to_vec(), grad.data().to_vec())),
        OpKind::Transpose => one(shape::transpose_forward(grad).expect("rank checked in forward")),
        OpKind::GroupNorm { groups, .. } => {
            let Saved::GroupStats(stats) = saved else { unreachable!("group_norm saves stats") };
            let (a, b, c) = norm::group_norm_backward(x, inputs[1], *groups, stats, grad, [need[0], need[1], need[2]]);
            vec![a, b, c]
        }
        OpKind::Softmax => one(norm::softmax_backward(output, grad)),
        OpKind::ScaledDotAttention => {
            let Saved::AttentionProbs(p) = saved else { unreachable!("attention saves probabilities") };
            let (a, b, c) = linalg::attention_backward(x, inputs[1], inputs[2], p, grad, [need[0], need[1], need[2]]);
            vec![a, b, c]
        }
        OpKind::TrilinearSample(points) => one(sample::trilinear_backward(x, points, grad)),
        OpKind::UpsampleTrilinear(f) => one(sample::upsample_backward(x, *f, grad)),
        OpKind::SparseGather(plan) => one(sample::gather_backward(x, plan, grad)),
    }
}
