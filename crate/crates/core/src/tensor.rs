//! Dense row-major `f64` tensors and the raw numeric kernels behind the
//! differentiable ops.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient, same length as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![m, n],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Dimension(format!(
                "expected C×H×W, got {:?}",
                self.shape
            ))),
        }
    }

    /// Per-pixel argmax over the leading (class) axis of a `K×H×W` map.
    pub fn argmax_channels(&self) -> Result<Vec<usize>> {
        let (k, h, w) = self.chw()?;
        let hw = h * w;
        Ok((0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if self.data[c * hw + p] > self.data[best * hw + p] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

/// `c = a·b` (+ `c` when `accumulate`), with optional transposes expressed
/// through strides. `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are sized m×k, k×n and m×n and the strides above
    // address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Dimension(format!(
            "expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Geometry of a 2-D convolution. Output extents are floored, so trailing
/// rows and columns that do not fill a whole stride are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Config("kernel and stride must be ≥ 1".into()));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Config(format!(
                "kernel {k} exceeds padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let span_h = h + 2 * pad - k;
        let span_w = w + 2 * pad - k;
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x` (C×H×W) into a `(C·k·k) × (outH·outW)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h, g.out_w);
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h, g.out_w);
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of `x` (C×H×W) with `kernels` (F×C×k×k), zero padding.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (f, kc, k) = kernel_dims(kernels)?;
    if kc != c {
        return Err(Error::Dimension(format!(
            "kernel expects {kc} channels, input has {c}"
        )));
    }
    let g = ConvGeom::new(c, h, w, k, stride, pad)?;
    let cols = im2col(x.data(), &g);
    let mut out = vec![0.0; f * g.out_len()];
    gemm(
        f,
        g.patch_len(),
        g.out_len(),
        kernels.data(),
        false,
        &cols,
        false,
        &mut out,
        false,
    );
    Tensor::new(vec![f, g.out_h, g.out_w], out)
}

pub(crate) fn kernel_dims(kernels: &Tensor) -> Result<(usize, usize, usize)> {
    match kernels.shape()[..] {
        [f, c, kh, kw] if kh == kw => Ok((f, c, kh)),
        _ => Err(Error::Dimension(format!(
            "expected square F×C×k×k kernels, got {:?}",
            kernels.shape()
        ))),
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, k, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(src[base + c * inner]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (src[base + c * inner] - max).exp();
                out[base + c * inner] = e;
                sum += e;
            }
            for c in 0..k {
                out[base + c * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::Dimension("softmax of a scalar".into()));
    }
    softmax_axis(x, x.rank() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    /// Half-pixel centres (`align_corners = false`): source coordinate
    /// `(dst + 0.5)·in/out − 0.5`, clamped to the valid range.
    Bilinear,
}

/// One output sample as a list of (source index, weight) pairs along an axis.
type Taps = Vec<[(usize, f64); 2]>;

fn axis_taps(inp: usize, out: usize, mode: ResizeMode) -> Taps {
    (0..out)
        .map(|d| match mode {
            ResizeMode::Nearest => {
                let s = (d * inp / out).min(inp - 1);
                [(s, 1.0), (s, 0.0)]
            }
            ResizeMode::Bilinear => {
                let scale = inp as f64 / out as f64;
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                [(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

pub(crate) struct ResizePlan {
    pub c: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    ty: Taps,
    tx: Taps,
}

impl ResizePlan {
    pub fn new(c: usize, h: usize, w: usize, nh: usize, nw: usize, mode: ResizeMode) -> Result<Self> {
        if nh == 0 || nw == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension("resize extents must be ≥ 1".into()));
        }
        Ok(ResizePlan {
            c,
            in_hw: (h, w),
            out_hw: (nh, nw),
            ty: axis_taps(h, nh, mode),
            tx: axis_taps(w, nw, mode),
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.in_hw;
        let (nh, nw) = self.out_hw;
        let mut out = vec![0.0; self.c * nh * nw];
        for c in 0..self.c {
            let src = &x[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * nh * nw..(c + 1) * nh * nw];
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let mut v = 0.0;
                    for &(iy, wy) in ty {
                        if wy == 0.0 {
                            continue;
                        }
                        for &(ix, wx) in tx {
                            if wx != 0.0 {
                                v += wy * wx * src[iy * w + ix];
                            }
                        }
                    }
                    dst[oy * nw + ox] = v;
                }
            }
        }
        out
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let (h, w) = self.in_hw;
        let (nh, nw) = self.out_hw;
        let mut dx = vec![0.0; self.c * h * w];
        for c in 0..self.c {
            let src = &g[c * nh * nw..(c + 1) * nh * nw];
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let gv = src[oy * nw + ox];
                    for &(iy, wy) in ty {
                        if wy == 0.0 {
                            continue;
                        }
                        for &(ix, wx) in tx {
                            if wx != 0.0 {
                                dst[iy * w + ix] += wy * wx * gv;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Resizes a `C×H×W` tensor. Same-size resizes are exact copies in both modes.
pub fn resize(x: &Tensor, new_h: usize, new_w: usize, mode: ResizeMode) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if (h, w) == (new_h, new_w) {
        return Tensor::new(x.shape().to_vec(), x.data().to_vec());
    }
    let plan = ResizePlan::new(c, h, w, new_h, new_w, mode)?;
    Tensor::new(vec![c, new_h, new_w], plan.forward(x.data()))
}
