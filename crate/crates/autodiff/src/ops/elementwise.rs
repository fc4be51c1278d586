//! Broadcasting binary ops and pointwise activations.

use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tensor::{numel, Tensor};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` seen through `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for (d, &i) in idx.iter().enumerate() {
            ia += i * sa[d];
            ib += i * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| shape_err(op, &[a.shape(), b.shape()], "not broadcastable"))?;
    if b.len() == 1 {
        let y = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if a.len() == 1 {
        let x = a.data()[0];
        let data = b.data().iter().map(|&y| f(x, y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums a broadcast gradient back down to `target` shape.
pub fn reduce_to<T: Element>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out = grad.shape();
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![T::zero(); numel(target)];
    let g = grad.data();
    for_each_broadcast(out, &st, &zeros, |o, it, _| acc[it] += g[o]);
    Tensor::from_parts(target.to_vec(), acc)
}

/// Gradient of `a * b` w.r.t. one side: `reduce_to(grad * other)`.
pub fn mul_grad<T: Element>(grad: &Tensor<T>, other: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let out = grad.shape();
    if other.shape() == out && target == out {
        let data = grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
        return Tensor::from_parts(out.to_vec(), data);
    }
    let st = broadcast_strides(target, out);
    let so = broadcast_strides(other.shape(), out);
    let mut acc = vec![T::zero(); numel(target)];
    let (g, od) = (grad.data(), other.data());
    for_each_broadcast(out, &st, &so, |o, it, io| acc[it] += g[o] * od[io]);
    Tensor::from_parts(target.to_vec(), acc)
}

#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    // log(1 + e^x) without overflow
    let zero = T::zero();
    x.max(zero) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[1, 4, 1], &[2, 1, 5]), Some(vec![2, 4, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn channel_bias_add_and_reduce() {
        let x = Tensor::<f64>::from_fn([1, 2, 3], |i| i as f64);
        let b = Tensor::new([1, 2, 1], vec![10.0, 20.0]).unwrap();
        let y = binary("add", &x, &b, |p, q| p + q).unwrap();
        assert_eq!(y.data(), &[10.0, 11.0, 12.0, 23.0, 24.0, 25.0]);
        let r = reduce_to(&y, &[1, 2, 1]);
        assert_eq!(r.data(), &[33.0, 72.0]);
    }

    #[test]
    fn stable_activations() {
        assert!(softplus(1000.0f64).is_finite());
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
