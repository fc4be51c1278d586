//! Gradient tape: nodes are appended in execution order, so the node list is
//! already a topological order and backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::ops::{self, ConvSpec, GatherPlan, OpKind, SamplePoints, Saved};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    /// `None` for leaves and for results nothing upstream needs gradients of.
    op: Option<(OpKind, Vec<Var>, Saved<T>)>,
    requires_grad: bool,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<(OpKind, Vec<Var>, Saved<T>)>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, None, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVar(v.0))
        }
    }

    /// Applies `kind` to `inputs`, recording it when any input needs gradients.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&kind, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| (kind, inputs.to_vec(), saved));
        Ok(self.push(value, op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some((kind, parents, saved)) = &node.op else {
                if node.requires_grad {
                    leaves.insert(Var(i), g);
                }
                continue;
            };
            let need: Vec<bool> = parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = ops::backward(kind, &inputs, &node.value, saved, &g, &need);
            for ((p, pg), needed) in parents.iter().zip(pgrads).zip(&need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { leaves })
    }

    // Convenience wrappers, one per op.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(OpKind::Scale(s), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        self.apply(OpKind::Conv2d(spec), &[x, w])
    }
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        self.apply(OpKind::Conv3d(spec), &[x, w])
    }
    pub fn transposed_conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        self.apply(OpKind::TransposedConv3d(spec), &[x, w])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum(None), &[x])
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Sum(Some(axis)), &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat(axis), xs)
    }
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.into()), &[x])
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.apply(OpKind::GroupNorm { groups, eps: 1e-5 }, &[x, gamma, beta])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[x])
    }
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.apply(OpKind::ScaledDotAttention, &[q, k, v])
    }
    pub fn trilinear_sample(&mut self, grid: Var, points: Arc<SamplePoints>) -> Result<Var> {
        self.apply(OpKind::TrilinearSample(points), &[grid])
    }
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(OpKind::UpsampleTrilinear(factor), &[x])
    }
    pub fn sparse_gather(&mut self, x: Var, plan: Arc<GatherPlan>) -> Result<Var> {
        self.apply(OpKind::SparseGather(plan), &[x])
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }
}

/// Gradients of a loss with respect to every `requires_grad` leaf it reaches.
#[derive(Debug, Default)]
pub struct Gradients<T: Element> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Gradient for `v`, zeros of `like`'s shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.leaves.get(&v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.leaves.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::new([4], vec![3.0, -1.0, 0.5, 2.0]).unwrap());
        let loss = t.mean(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::ones([2]));
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(2x) -> grad 3
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::ones([2]));
        let a = t.sum(x).unwrap();
        let x2 = t.scale(x, 2.0).unwrap();
        let b = t.sum(x2).unwrap();
        let loss = t.add(a, b).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut t = Tape::<f32>::new();
        let c = t.constant(Tensor::ones([2]));
        let y = t.exp(c).unwrap();
        assert!(!t.requires_grad(y));
        let x = t.param(Tensor::ones([2]));
        let z = t.mul(x, y).unwrap();
        let loss = t.sum(z).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert!((g.get(x).unwrap().data()[0] - std::f32::consts::E).abs() < 1e-6);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::ones([2, 3]));
        let b = t.constant(Tensor::ones([2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"));
    }

    #[test]
    fn unknown_op_name() {
        assert!(matches!("fft".parse::<OpKind>(), Err(AutodiffError::UnsupportedOp(_))));
        assert_eq!("relu".parse::<OpKind>().unwrap(), OpKind::Relu);
    }
}
