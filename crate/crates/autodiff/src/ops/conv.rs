//! Convolutions lowered to GEMM through im2col / col2im.
//!
//! 2D convolution reuses the 3D kernels with a unit depth axis.

use crate::element::{gemm, Element};
use crate::error::{shape_err, AutodiffError, Result};
use crate::tensor::Tensor;

/// Stride and zero padding shared by every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0 }
    }
}

/// Geometry of a dense convolution over `[channels, d, h, w]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Geometry {
    pub fn new(channels: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad[a];
            if stride[a] == 0 || span < kernel[a] {
                return None;
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Some(Geometry { channels, input, kernel, stride, pad, output })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }
}

/// Offsets into the input along one axis for each output position at kernel tap `k`.
#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < extent {
        Some(i as usize)
    } else {
        None
    }
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = source_index(oz, kz, g.stride[0], g.pad[0], id);
                        for oy in 0..oh {
                            let iy = source_index(oy, ky, g.stride[1], g.pad[1], ih);
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let base = (iz * ih + iy) * iw;
                                    for ox in 0..ow {
                                        dst[o] = match source_index(ox, kx, g.stride[2], g.pad[2], iw) {
                                            Some(ix) => xc[base + ix],
                                            None => T::zero(),
                                        };
                                        o += 1;
                                    }
                                }
                                _ => {
                                    dst[o..o + ow].fill(T::zero());
                                    o += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = source_index(oz, kz, g.stride[0], g.pad[0], id);
                        for oy in 0..oh {
                            let iy = source_index(oy, ky, g.stride[1], g.pad[1], ih);
                            if let (Some(iz), Some(iy)) = (iz, iy) {
                                let base = (iz * ih + iy) * iw;
                                for ox in 0..ow {
                                    if let Some(ix) = source_index(ox, kx, g.stride[2], g.pad[2], iw) {
                                        xc[base + ix] += src[o];
                                    }
                                    o += 1;
                                }
                            } else {
                                o += ow;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Normalized view of an N-d convolution as 3 spatial axes.
struct ConvShapes {
    batch: usize,
    geom: Geometry,
    out_channels: usize,
}

fn conv_shapes(op: &'static str, x: &[usize], w: &[usize], spec: ConvSpec, spatial: usize) -> Result<ConvShapes> {
    if x.len() != spatial + 2 || w.len() != spatial + 2 {
        return Err(shape_err(op, &[x, w], format!("expected rank-{} input and weight", spatial + 2)));
    }
    if x[1] != w[1] {
        return Err(shape_err(op, &[x, w], "input channels differ from weight"));
    }
    let lift = |s: &[usize], fill: usize| -> [usize; 3] {
        if spatial == 2 {
            [fill, s[0], s[1]]
        } else {
            [s[0], s[1], s[2]]
        }
    };
    let input = lift(&x[2..], 1);
    let kernel = lift(&w[2..], 1);
    let stride = lift(&[spec.stride; 3], 1);
    let pad = lift(&[spec.padding; 3], 0);
    let geom = Geometry::new(x[1], input, kernel, stride, pad)
        .ok_or_else(|| shape_err(op, &[x, w], "kernel larger than padded input or zero stride"))?;
    Ok(ConvShapes { batch: x[0], geom, out_channels: w[0] })
}

fn out_shape(batch: usize, channels: usize, dims: [usize; 3], spatial: usize) -> Vec<usize> {
    if spatial == 2 {
        vec![batch, channels, dims[1], dims[2]]
    } else {
        vec![batch, channels, dims[0], dims[1], dims[2]]
    }
}

pub fn conv_forward<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    spatial: usize,
) -> Result<Tensor<T>> {
    let s = conv_shapes(op, x.shape(), w.shape(), spec, spatial)?;
    let g = s.geom;
    let (k, p, co) = (g.col_rows(), g.col_cols(), s.out_channels);
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); s.batch * co * p];
    let in_len = g.input_len();
    for b in 0..s.batch {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
        gemm(false, false, co, k, p, w.data(), &cols, T::zero(), &mut out[b * co * p..(b + 1) * co * p]);
    }
    Ok(Tensor::from_parts(out_shape(s.batch, co, g.output, spatial), out))
}

/// Returns `(grad_x, grad_w)`, each only when requested.
pub fn conv_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    spec: ConvSpec,
    spatial: usize,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = conv_shapes("conv", x.shape(), w.shape(), spec, spatial).expect("validated in forward");
    let g = s.geom;
    let (k, p, co) = (g.col_rows(), g.col_cols(), s.out_channels);
    let in_len = g.input_len();
    let mut cols = vec![T::zero(); k * p];
    let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.len()]);
    for b in 0..s.batch {
        let gout = &grad.data()[b * co * p..(b + 1) * co * p];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
            gemm(false, true, co, p, k, gout, &cols, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(true, false, k, co, p, w.data(), gout, T::zero(), &mut cols);
            col2im(&cols, &g, &mut gx[b * in_len..(b + 1) * in_len]);
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    )
}

/// Geometry of the convolution whose adjoint is the transposed convolution.
fn transposed_shapes(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<(usize, usize, Geometry)> {
    const OP: &str = "transposed_conv3d";
    if x.len() != 5 || w.len() != 5 {
        return Err(shape_err(OP, &[x, w], "expected rank-5 input and weight [ci, co, k, k, k]"));
    }
    if x[1] != w[0] {
        return Err(shape_err(OP, &[x, w], "input channels differ from weight"));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        let full = (x[2 + a] - 1) * spec.stride + w[2 + a];
        if spec.stride == 0 || full <= 2 * spec.padding {
            return Err(AutodiffError::InvalidAttr { op: OP, detail: format!("{spec:?} yields empty output") });
        }
        out[a] = full - 2 * spec.padding;
    }
    let kernel = [w[2], w[3], w[4]];
    let g = Geometry::new(w[1], out, kernel, [spec.stride; 3], [spec.padding; 3])
        .ok_or_else(|| shape_err(OP, &[x, w], "inconsistent geometry"))?;
    if g.output != [x[2], x[3], x[4]] {
        return Err(shape_err(OP, &[x, w], "padding/stride do not invert"));
    }
    Ok((x[0], x[1], g))
}

pub fn transposed_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (batch, ci, g) = transposed_shapes(x.shape(), w.shape(), spec)?;
    let (k, p) = (g.col_rows(), g.col_cols());
    let out_len = g.input_len();
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); batch * out_len];
    for b in 0..batch {
        gemm(true, false, k, ci, p, w.data(), &x.data()[b * ci * p..(b + 1) * ci * p], T::zero(), &mut cols);
        col2im(&cols, &g, &mut out[b * out_len..(b + 1) * out_len]);
    }
    Ok(Tensor::from_parts(out_shape(batch, g.channels, g.input, 3), out))
}

pub fn transposed_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    spec: ConvSpec,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, ci, g) = transposed_shapes(x.shape(), w.shape(), spec).expect("validated in forward");
    let (k, p) = (g.col_rows(), g.col_cols());
    let out_len = g.input_len();
    let mut cols = vec![T::zero(); k * p];
    let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.len()]);
    for b in 0..batch {
        im2col(&grad.data()[b * out_len..(b + 1) * out_len], &g, &mut cols);
        if let Some(gx) = gx.as_mut() {
            gemm(false, false, ci, k, p, w.data(), &cols, T::zero(), &mut gx[b * ci * p..(b + 1) * ci * p]);
        }
        if let Some(gw) = gw.as_mut() {
            gemm(false, true, ci, p, k, &x.data()[b * ci * p..(b + 1) * ci * p], &cols, T::one(), gw);
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    )
}
