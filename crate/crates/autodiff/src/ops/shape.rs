use crate::element::Element;
use crate::error::{shape_err, AutodiffError, Result};
use crate::tensor::{numel, Tensor};

/// `(outer, axis extent, inner)` decomposition of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

pub fn concat_forward<T: Element>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(AutodiffError::Arity { op: "concat", expected: 1, got: 0 })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(AutodiffError::InvalidAttr { op: "concat", detail: format!("axis {axis} >= rank {rank}") });
    }
    for t in inputs {
        let ok = t.rank() == rank && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
        if !ok {
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
            return Err(shape_err("concat", &shapes, format!("only axis {axis} may differ")));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = split(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Gradient slice for input `which` of a concat.
pub fn concat_backward<T: Element>(inputs: &[&Tensor<T>], axis: usize, grad: &Tensor<T>, which: usize) -> Tensor<T> {
    let start: usize = inputs[..which].iter().map(|t| t.shape()[axis]).sum();
    slice_forward(grad, axis, start, start + inputs[which].shape()[axis]).expect("validated in forward")
}

pub fn slice_forward<T: Element>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start >= end || end > x.shape()[axis] {
        return Err(AutodiffError::InvalidAttr {
            op: "slice",
            detail: format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
        });
    }
    let (outer, n, inner) = split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice_backward<T: Element>(x: &Tensor<T>, axis: usize, start: usize, end: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (outer, n, inner) = split(x.shape(), axis);
    let w = (end - start) * inner;
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        out[(o * n + start) * inner..(o * n + end) * inner].copy_from_slice(&grad.data()[o * w..(o + 1) * w]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Swaps the last two axes.
pub fn transpose_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(shape_err("transpose", &[x.shape()], "needs rank >= 2"));
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (m * n);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, out))
}

/// Sum over one axis (removed from the shape) or over everything (`[1]`).
pub fn sum_forward<T: Element>(x: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>> {
    let Some(axis) = axis else {
        return Ok(Tensor::scalar(x.sum()));
    };
    if axis >= x.rank() {
        return Err(AutodiffError::InvalidAttr { op: "sum", detail: format!("axis {axis} >= rank {}", x.rank()) });
    }
    let (outer, n, inner) = split(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let src = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn sum_backward<T: Element>(x: &Tensor<T>, axis: Option<usize>, grad: &Tensor<T>) -> Tensor<T> {
    let Some(axis) = axis else {
        return Tensor::full(x.shape().to_vec(), grad.item());
    };
    let (outer, n, inner) = split(x.shape(), axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let g = &grad.data()[o * inner..(o + 1) * inner];
        for k in 0..n {
            out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(g);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
