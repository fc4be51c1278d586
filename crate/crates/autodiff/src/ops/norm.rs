use crate::element::Element;
use crate::error::{shape_err, AutodiffError, Result};
use crate::tensor::Tensor;

fn group_dims(x: &[usize], gamma: &[usize], beta: &[usize], groups: usize) -> Result<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(shape_err("group_norm", &[x], "expected [b, c, ...]"));
    }
    let (b, c) = (x[0], x[1]);
    if gamma != [c] || beta != [c] {
        return Err(shape_err("group_norm", &[x, gamma, beta], "affine params must be [c]"));
    }
    if groups == 0 || c % groups != 0 {
        return Err(AutodiffError::InvalidAttr {
            op: "group_norm",
            detail: format!("{c} channels not divisible into {groups} groups"),
        });
    }
    Ok((b, c, x[2..].iter().product()))
}

/// Per-(batch, group) mean and reciprocal std saved for backward.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let (b, c, s) = group_dims(x.shape(), gamma.shape(), beta.shape(), groups)?;
    let cg = c / groups;
    let len = cg * s;
    let mut out = vec![T::zero(); x.len()];
    let mut stats = GroupStats { mean: Vec::with_capacity(b * groups), rstd: Vec::with_capacity(b * groups) };
    for bi in 0..b {
        for g in 0..groups {
            let start = (bi * c + g * cg) * s;
            let xs = &x.data()[start..start + len];
            let n = T::from_f64c(len as f64);
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::from_f64c(eps)).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for k in 0..s {
                    let i = start + ci * s + k;
                    out[i] = (x.data()[i] - mean) * rstd * ga + be;
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

#[allow(clippy::type_complexity)]
pub fn group_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    stats: &GroupStats<T>,
    grad: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let shape = x.shape();
    let (b, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let cg = c / groups;
    let len = cg * s;
    let n = T::from_f64c(len as f64);
    let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let (xd, gd) = (x.data(), grad.data());
    for bi in 0..b {
        for g in 0..groups {
            let (mean, rstd) = (stats.mean[bi * groups + g], stats.rstd[bi * groups + g]);
            let start = (bi * c + g * cg) * s;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for k in 0..s {
                    let i = start + ci * s + k;
                    let xhat = (xd[i] - mean) * rstd;
                    gg[ch] += gd[i] * xhat;
                    gb[ch] += gd[i];
                    let dxhat = gd[i] * gamma.data()[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            if let Some(gx) = gx.as_mut() {
                let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for k in 0..s {
                        let i = start + ci * s + k;
                        let xhat = (xd[i] - mean) * rstd;
                        gx[i] = rstd * (gd[i] * gamma.data()[ch] - m1 - xhat * m2);
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(shape.to_vec(), d)),
        need[1].then(|| Tensor::from_parts(vec![c], gg)),
        need[2].then(|| Tensor::from_parts(vec![c], gb)),
    )
}

pub fn softmax_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let mut d = x.data().to_vec();
    super::linalg::softmax_rows(&mut d, n);
    Tensor::from_parts(x.shape().to_vec(), d)
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let mut out = vec![T::zero(); y.len()];
    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(grad.data().chunks(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}
