use crate::element::{gemm, Element};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `(batch, m, k, n)` for `[m,k]x[k,n]` or `[b,m,k]x[b,k,n]`.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(shape_err("matmul", &[a, b], "inner dimensions or batch differ")),
    }
}

pub fn matmul_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            false,
            false,
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Ok(Tensor::from_parts(shape, out))
}

pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let g = grad.data();
    let ga = need[0].then(|| {
        let mut d = vec![T::zero(); a.len()];
        for i in 0..batch {
            // dA = dC * B^T
            gemm(
                false,
                true,
                m,
                n,
                k,
                &g[i * m * n..(i + 1) * m * n],
                &b.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut d[i * m * k..(i + 1) * m * k],
            );
        }
        Tensor::from_parts(a.shape().to_vec(), d)
    });
    let gb = need[1].then(|| {
        let mut d = vec![T::zero(); b.len()];
        for i in 0..batch {
            // dB = A^T * dC
            gemm(
                true,
                false,
                k,
                m,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                &g[i * m * n..(i + 1) * m * n],
                T::zero(),
                &mut d[i * k * n..(i + 1) * k * n],
            );
        }
        Tensor::from_parts(b.shape().to_vec(), d)
    });
    (ga, gb)
}

fn attention_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    match (q, k, v) {
        ([b, lq, d], [b2, lk, d2], [b3, lk2, dv]) if b == b2 && b == b3 && d == d2 && lk == lk2 => {
            Ok((*b, *lq, *lk, *d, *dv))
        }
        _ => Err(shape_err(
            "scaled_dot_attention",
            &[q, k, v],
            "expected q [b, lq, d], k [b, lk, d], v [b, lk, dv]",
        )),
    }
}

/// Row softmax in place over rows of length `n`.
pub(crate) fn softmax_rows<T: Element>(x: &mut [T], n: usize) {
    for row in x.chunks_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// `softmax(q k^T / sqrt(d)) v`; returns output and the attention weights.
pub fn attention_forward<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, lq, lk, d, dv) = attention_dims(q.shape(), k.shape(), v.shape())?;
    let scale = T::from_f64c(1.0 / (d as f64).sqrt());
    let mut probs = vec![T::zero(); b * lq * lk];
    let mut out = vec![T::zero(); b * lq * dv];
    for i in 0..b {
        let p = &mut probs[i * lq * lk..(i + 1) * lq * lk];
        gemm(false, true, lq, d, lk, &q.data()[i * lq * d..(i + 1) * lq * d], &k.data()[i * lk * d..(i + 1) * lk * d], T::zero(), p);
        for s in p.iter_mut() {
            *s *= scale;
        }
        softmax_rows(p, lk);
        gemm(false, false, lq, lk, dv, p, &v.data()[i * lk * dv..(i + 1) * lk * dv], T::zero(), &mut out[i * lq * dv..(i + 1) * lq * dv]);
    }
    Ok((Tensor::from_parts(vec![b, lq, dv], out), probs))
}

#[allow(clippy::type_complexity)]
pub fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    grad: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, lq, lk, d, dv) = attention_dims(q.shape(), k.shape(), v.shape()).expect("validated in forward");
    let scale = T::from_f64c(1.0 / (d as f64).sqrt());
    let mut gq = need[0].then(|| vec![T::zero(); q.len()]);
    let mut gk = need[1].then(|| vec![T::zero(); k.len()]);
    let mut gv = need[2].then(|| vec![T::zero(); v.len()]);
    let mut dp = vec![T::zero(); lq * lk];
    for i in 0..b {
        let p = &probs[i * lq * lk..(i + 1) * lq * lk];
        let go = &grad.data()[i * lq * dv..(i + 1) * lq * dv];
        let vi = &v.data()[i * lk * dv..(i + 1) * lk * dv];
        if let Some(gv) = gv.as_mut() {
            gemm(true, false, lk, lq, dv, p, go, T::zero(), &mut gv[i * lk * dv..(i + 1) * lk * dv]);
        }
        if gq.is_none() && gk.is_none() {
            continue;
        }
        gemm(false, true, lq, dv, lk, go, vi, T::zero(), &mut dp);
        // d scores = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(d) scale
        for (drow, prow) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot) * scale;
            }
        }
        if let Some(gq) = gq.as_mut() {
            gemm(false, false, lq, lk, d, &dp, &k.data()[i * lk * d..(i + 1) * lk * d], T::zero(), &mut gq[i * lq * d..(i + 1) * lq * d]);
        }
        if let Some(gk) = gk.as_mut() {
            gemm(true, false, lk, lq, d, &dp, &q.data()[i * lq * d..(i + 1) * lq * d], T::zero(), &mut gk[i * lk * d..(i + 1) * lk * d]);
        }
    }
    (
        gq.map(|d| Tensor::from_parts(q.shape().to_vec(), d)),
        gk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
        gv.map(|d| Tensor::from_parts(v.shape().to_vec(), d)),
    )
}
