//! Linear resampling ops: trilinear point sampling, trilinear upsampling and
//! a precomputed sparse gather. All three are linear in the sampled tensor,
//! so their backward passes are the transposed scatter.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{shape_err, AutodiffError, Result};
use crate::tensor::Tensor;

/// Lattice index and interpolation weight along one axis for a coordinate in
/// `[-1, 1]`, with voxel centres at `2(k + 0.5)/n - 1`.
///
/// Coordinates between the outermost centre and the box face clamp to the
/// edge voxel.
#[inline]
pub fn axis_taps(coord: f64, n: usize) -> (usize, usize, f64) {
    let f = ((coord + 1.0) * 0.5 * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (f.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

/// The 8 lattice offsets and weights for a point, or `None` outside `[-1,1]^3`.
#[inline]
pub fn trilinear_taps(p: [f64; 3], dims: [usize; 3]) -> Option<[(usize, f64); 8]> {
    if p.iter().any(|c| !(-1.0..=1.0).contains(c)) {
        return None;
    }
    let [d, h, w] = dims;
    let (x0, x1, fx) = axis_taps(p[0], w);
    let (y0, y1, fy) = axis_taps(p[1], h);
    let (z0, z1, fz) = axis_taps(p[2], d);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    Some([
        (idx(z0, y0, x0), (1.0 - fz) * (1.0 - fy) * (1.0 - fx)),
        (idx(z0, y0, x1), (1.0 - fz) * (1.0 - fy) * fx),
        (idx(z0, y1, x0), (1.0 - fz) * fy * (1.0 - fx)),
        (idx(z0, y1, x1), (1.0 - fz) * fy * fx),
        (idx(z1, y0, x0), fz * (1.0 - fy) * (1.0 - fx)),
        (idx(z1, y0, x1), fz * (1.0 - fy) * fx),
        (idx(z1, y1, x0), fz * fy * (1.0 - fx)),
        (idx(z1, y1, x1), fz * fy * fx),
    ])
}

/// World-space query points `(x, y, z)` for `trilinear_sample`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoints(pub Vec<[f64; 3]>);

fn grid_dims(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, d, h, w] => Ok((c, [d, h, w])),
        [1, c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(shape_err(op, &[shape], "expected grid [c, d, h, w] or [1, c, d, h, w]")),
    }
}

/// `[c, d, h, w]` grid sampled at points -> `[points, c]`.
pub fn trilinear_forward<T: Element>(grid: &Tensor<T>, points: &SamplePoints) -> Result<Tensor<T>> {
    let (c, dims) = grid_dims("trilinear_sample", grid.shape())?;
    if points.0.is_empty() {
        return Err(AutodiffError::InvalidAttr { op: "trilinear_sample", detail: "no sample points".into() });
    }
    let vox: usize = dims.iter().product();
    let g = grid.data();
    let mut out = vec![T::zero(); points.0.len() * c];
    for (pi, &p) in points.0.iter().enumerate() {
        if let Some(taps) = trilinear_taps(p, dims) {
            let row = &mut out[pi * c..(pi + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let base = ch * vox;
                let mut acc = 0.0;
                for &(i, wt) in &taps {
                    acc += wt * g[base + i].to_f64c();
                }
                *o = T::from_f64c(acc);
            }
        }
    }
    Ok(Tensor::from_parts(vec![points.0.len(), c], out))
}

pub fn trilinear_backward<T: Element>(grid: &Tensor<T>, points: &SamplePoints, grad: &Tensor<T>) -> Tensor<T> {
    let (c, dims) = grid_dims("trilinear_sample", grid.shape()).expect("validated in forward");
    let vox: usize = dims.iter().product();
    let gd = grad.data();
    let mut acc = vec![T::zero(); grid.len()];
    for (pi, &p) in points.0.iter().enumerate() {
        if let Some(taps) = trilinear_taps(p, dims) {
            for ch in 0..c {
                let go = gd[pi * c + ch];
                if go == T::zero() {
                    continue;
                }
                let base = ch * vox;
                for &(i, wt) in &taps {
                    acc[base + i] += T::from_f64c(wt) * go;
                }
            }
        }
    }
    Tensor::from_parts(grid.shape().to_vec(), acc)
}

/// Source taps for one upsampled index along an axis (align-corners off).
#[inline]
fn upsample_taps(j: usize, n: usize, factor: usize) -> (usize, usize, f64) {
    let f = ((j as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

/// Linear interpolation along the middle axis of `[outer, n, inner]`.
fn interp_axis<T: Element>(x: &[T], outer: usize, n: usize, inner: usize, factor: usize) -> Vec<T> {
    let m = n * factor;
    let mut out = vec![T::zero(); outer * m * inner];
    for j in 0..m {
        let (i0, i1, f) = upsample_taps(j, n, factor);
        let (w0, w1) = (T::from_f64c(1.0 - f), T::from_f64c(f));
        for o in 0..outer {
            let src0 = &x[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let src1 = &x[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            for ((d, &a), &b) in dst.iter_mut().zip(src0).zip(src1) {
                *d = w0 * a + w1 * b;
            }
        }
    }
    out
}

/// Adjoint of [`interp_axis`].
fn interp_axis_adjoint<T: Element>(g: &[T], outer: usize, n: usize, inner: usize, factor: usize) -> Vec<T> {
    let m = n * factor;
    let mut out = vec![T::zero(); outer * n * inner];
    for j in 0..m {
        let (i0, i1, f) = upsample_taps(j, n, factor);
        let (w0, w1) = (T::from_f64c(1.0 - f), T::from_f64c(f));
        for o in 0..outer {
            let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
            for (k, &v) in src.iter().enumerate() {
                out[(o * n + i0) * inner + k] += w0 * v;
                out[(o * n + i1) * inner + k] += w1 * v;
            }
        }
    }
    out
}

fn upsample_dims(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [b, c, d, h, w] => Ok((b * c, [d, h, w])),
        _ => Err(shape_err("upsample_trilinear", &[shape], "expected [b, c, d, h, w]")),
    }
}

pub fn upsample_forward<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(AutodiffError::InvalidAttr { op: "upsample_trilinear", detail: "factor must be >= 1".into() });
    }
    let (bc, [d, h, w]) = upsample_dims(x.shape())?;
    let s1 = interp_axis(x.data(), bc * d * h, w, 1, factor);
    let s2 = interp_axis(&s1, bc * d, h, w * factor, factor);
    let s3 = interp_axis(&s2, bc, d, h * factor * w * factor, factor);
    let sh = x.shape();
    Ok(Tensor::from_parts(vec![sh[0], sh[1], d * factor, h * factor, w * factor], s3))
}

pub fn upsample_backward<T: Element>(x: &Tensor<T>, factor: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (bc, [d, h, w]) = upsample_dims(x.shape()).expect("validated in forward");
    let g2 = interp_axis_adjoint(grad.data(), bc, d, h * factor * w * factor, factor);
    let g1 = interp_axis_adjoint(&g2, bc * d, h, w * factor, factor);
    let g0 = interp_axis_adjoint(&g1, bc * d * h, w, 1, factor);
    Tensor::from_parts(x.shape().to_vec(), g0)
}

/// Fixed sparse linear map used by `sparse_gather`.
///
/// Input is viewed as `[a, c, b]` (channels on axis 1); each output column
/// `o` receives `sum_k weight_k * x[src_k / b, ch, src_k % b]` for every
/// channel `ch`. Output shape is `[c, rows]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherPlan {
    pub offsets: Vec<usize>,
    pub sources: Vec<u32>,
    pub weights: Vec<f64>,
    /// Number of addressable source positions (`a * b`).
    pub source_len: usize,
}

impl GatherPlan {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn from_rows(rows: &[Vec<(u32, f64)>], source_len: usize) -> Arc<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for r in rows {
            for &(s, w) in r {
                sources.push(s);
                weights.push(w);
            }
            offsets.push(sources.len());
        }
        Arc::new(GatherPlan { offsets, sources, weights, source_len })
    }
}

fn gather_dims(shape: &[usize], plan: &GatherPlan) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err("sparse_gather", &[shape], "input needs a channel axis"));
    }
    let (a, c) = (shape[0], shape[1]);
    let b: usize = shape[2..].iter().product();
    if plan.rows() == 0 {
        return Err(AutodiffError::InvalidAttr { op: "sparse_gather", detail: "plan has no rows".into() });
    }
    if a * b != plan.source_len || plan.sources.iter().any(|&s| s as usize >= plan.source_len) {
        return Err(shape_err("sparse_gather", &[shape], "plan does not address this input"));
    }
    Ok((a, c, b))
}

pub fn gather_forward<T: Element>(x: &Tensor<T>, plan: &GatherPlan) -> Result<Tensor<T>> {
    let (_, c, b) = gather_dims(x.shape(), plan)?;
    let rows = plan.rows();
    let xd = x.data();
    let mut out = vec![T::zero(); c * rows];
    let mut acc = vec![0.0f64; c];
    for r in 0..rows {
        acc.fill(0.0);
        for k in plan.offsets[r]..plan.offsets[r + 1] {
            let s = plan.sources[k] as usize;
            let (ai, bi) = (s / b, s % b);
            let w = plan.weights[k];
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += w * xd[(ai * c + ch) * b + bi].to_f64c();
            }
        }
        for ch in 0..c {
            out[ch * rows + r] = T::from_f64c(acc[ch]);
        }
    }
    Ok(Tensor::from_parts(vec![c, rows], out))
}

pub fn gather_backward<T: Element>(x: &Tensor<T>, plan: &GatherPlan, grad: &Tensor<T>) -> Tensor<T> {
    let (_, c, b) = gather_dims(x.shape(), plan).expect("validated in forward");
    let rows = plan.rows();
    let gd = grad.data();
    let mut acc = vec![T::zero(); x.len()];
    for r in 0..rows {
        for k in plan.offsets[r]..plan.offsets[r + 1] {
            let s = plan.sources[k] as usize;
            let (ai, bi) = (s / b, s % b);
            let w = T::from_f64c(plan.weights[k]);
            for ch in 0..c {
                acc[(ai * c + ch) * b + bi] += w * gd[ch * rows + r];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_at_voxel_centre_are_exact() {
        // n = 4: centres at -0.75, -0.25, 0.25, 0.75
        let (i0, _, f) = axis_taps(-0.25, 4);
        assert_eq!((i0, f), (1, 0.0));
        let (i0, i1, f) = axis_taps(0.0, 4);
        assert_eq!((i0, i1), (1, 2));
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_band_clamps_to_edge() {
        assert_eq!(axis_taps(-0.95, 4), (0, 1, 0.0));
        assert_eq!(axis_taps(0.99, 4), (3, 3, 0.0));
    }

    #[test]
    fn outside_box_has_no_taps() {
        assert!(trilinear_taps([1.01, 0.0, 0.0], [2, 2, 2]).is_none());
        assert!(trilinear_taps([0.0, 0.0, -5.0], [2, 2, 2]).is_none());
    }

    #[test]
    fn upsample_constant() {
        let x = Tensor::<f64>::full([1, 2, 3, 3, 3], 1.5);
        let y = upsample_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn gather_weighted_sum() {
        // input [2 views, 1 channel, 3 pixels]
        let x = Tensor::<f64>::new([2, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let plan = GatherPlan::from_rows(&[vec![(0, 0.5), (4, 0.5)], vec![]], 6);
        let y = gather_forward(&x, &plan).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[10.5, 0.0]);
    }
}
