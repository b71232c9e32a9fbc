//! Dense row-major `f64` tensors and the forward/backward kernels used by
//! the models: linear, 3x3 convolution, ReLU, pooling, upsampling, channel
//! concatenation and row softmax.
//!
//! Kernels here are plain functions over [`Tensor`]. The [`crate::tape`]
//! module records them and replays the backward kernels in reverse order.

use crate::error::{dim_err, Error, Result};

/// A dense tensor of rank at most 4, stored contiguously in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub const MAX_RANK: usize = 4;

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > Self::MAX_RANK {
            return dim_err(format!("rank {} exceeds {}", shape.len(), Self::MAX_RANK));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!("shape {:?} holds {} values but {} were supplied", shape, n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > Self::MAX_RANK {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return dim_err(format!("{what}: expected rank {rank}, got shape {:?}", self.shape));
        }
        Ok(())
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        self.expect_rank(3, "chw")?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }
}

/// `y = x W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.expect_rank(2, "linear input")?;
    w.expect_rank(2, "linear weight")?;
    b.expect_rank(1, "linear bias")?;
    let (batch, inp) = (x.shape[0], x.shape[1]);
    let out = w.shape[1];
    if w.shape[0] != inp || b.shape[0] != out {
        return dim_err(format!("linear: x {:?}, W {:?}, b {:?}", x.shape, w.shape, b.shape));
    }
    let mut y = vec![0.0; batch * out];
    for r in 0..batch {
        let row = &mut y[r * out..(r + 1) * out];
        row.copy_from_slice(&b.data);
        for i in 0..inp {
            let xv = x.data[r * inp + i];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[i * out..(i + 1) * out];
            for (yo, wo) in row.iter_mut().zip(wrow) {
                *yo += xv * wo;
            }
        }
    }
    Tensor::new(&[batch, out], y)
}

/// Gradients of [`linear_forward`]: `(dx, dW, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, inp) = (x.shape[0], x.shape[1]);
    let out = w.shape[1];
    let mut dx = vec![0.0; batch * inp];
    let mut dw = vec![0.0; inp * out];
    let mut db = vec![0.0; out];
    for r in 0..batch {
        let g = &gy.data[r * out..(r + 1) * out];
        for (d, gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for i in 0..inp {
            let wrow = &w.data[i * out..(i + 1) * out];
            dx[r * inp + i] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            let xv = x.data[r * inp + i];
            let dwrow = &mut dw[i * out..(i + 1) * out];
            for (d, gv) in dwrow.iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: w.shape.clone(),
            data: dw,
        },
        Tensor {
            shape: vec![out],
            data: db,
        },
    )
}

#[inline]
fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Range of output columns `ox` for which `ox*stride + k - 1` lands inside `[0, n)`.
#[inline]
fn valid_out_range(out_n: usize, n: usize, stride: usize, k: usize) -> (usize, usize) {
    // ix = ox*stride + k - 1 >= 0  ->  ox >= ceil((1-k)/stride)
    let lo = if k == 0 { 1 } else { 0 };
    // ix < n  ->  ox*stride < n + 1 - k
    let limit = n + 1 - k;
    let hi = limit.div_ceil(stride).min(out_n);
    (lo.min(hi), hi)
}

fn check_conv(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<()> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("conv stride must be 1 or 2, got {stride}")));
    }
    x.expect_rank(3, "conv input")?;
    kernels.expect_rank(4, "conv kernels")?;
    bias.expect_rank(1, "conv bias")?;
    let ks = kernels.shape();
    if ks[1] != x.shape[0] || ks[2] != 3 || ks[3] != 3 || bias.shape[0] != ks[0] {
        return dim_err(format!("conv: input {:?}, kernels {:?}, bias {:?}", x.shape, ks, bias.shape));
    }
    Ok(())
}

/// 3x3 convolution with zero padding of one cell and stride 1 or 2.
///
/// `x: [C_in, H, W]`, `kernels: [C_out, C_in, 3, 3]`, `bias: [C_out]`;
/// the output is `[C_out, ceil(H/stride), ceil(W/stride)]`.
pub fn conv3x3_forward(x: &Tensor, kernels: &Tensor, stride: usize, bias: &Tensor) -> Result<Tensor> {
    check_conv(x, kernels, bias, stride)?;
    let (cin, h, w) = x.chw()?;
    let cout = kernels.shape[0];
    let (oh, ow) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias.data[co]);
        for ci in 0..cin {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * 9;
            for ky in 0..3 {
                let (oy0, oy1) = valid_out_range(oh, h, stride, ky);
                for kx in 0..3 {
                    let kv = kernels.data[kbase + ky * 3 + kx];
                    let (ox0, ox1) = valid_out_range(ow, w, stride, kx);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - 1;
                        let srow = &src[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let s = &srow[ox0 + kx - 1..ox1 + kx - 1];
                            for (o, sv) in orow[ox0..ox1].iter_mut().zip(s) {
                                *o += kv * sv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += kv * srow[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out)
}

/// Gradients of [`conv3x3_forward`]: `(dx, dkernels, dbias)`.
pub fn conv3x3_backward(x: &Tensor, kernels: &Tensor, stride: usize, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let cout = kernels.shape[0];
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut dx = vec![0.0; cin * h * w];
    let mut dk = vec![0.0; kernels.data.len()];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let g = &gy.data[co * oh * ow..(co + 1) * oh * ow];
        db[co] = g.iter().sum();
        for ci in 0..cin {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            let dsrc = &mut dx[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * 9;
            for ky in 0..3 {
                let (oy0, oy1) = valid_out_range(oh, h, stride, ky);
                for kx in 0..3 {
                    let kv = kernels.data[kbase + ky * 3 + kx];
                    let (ox0, ox1) = valid_out_range(ow, w, stride, kx);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - 1;
                        let grow = &g[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let lo = iy * w + ox0 + kx - 1;
                            let hi = iy * w + ox1 + kx - 1;
                            let s = &src[lo..hi];
                            let ds = &mut dsrc[lo..hi];
                            for ((gv, sv), d) in grow[ox0..ox1].iter().zip(s).zip(ds) {
                                acc += gv * sv;
                                *d += kv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = iy * w + ox * stride + kx - 1;
                                acc += grow[ox] * src[ix];
                                dsrc[ix] += kv * grow[ox];
                            }
                        }
                    }
                    dk[kbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: kernels.shape.clone(),
            data: dk,
        },
        Tensor {
            shape: vec![cout],
            data: db,
        },
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Mean over the spatial extents of a `[C, H, W]` map, giving `[C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let hw = (h * w) as f64;
    let data = x.data.chunks(h * w).map(|plane| plane.iter().sum::<f64>() / hw).collect();
    Tensor::new(&[c], data)
}

/// Nearest-neighbour upsampling by two along both spatial axes.
pub fn nearest_upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub(crate) fn upsample2x_backward(x_shape: &[usize], gy: &Tensor) -> Tensor {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let ow = 2 * w;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..ow {
                dx[(ch * h + y / 2) * w + xx / 2] += gy.data[(ch * 2 * h + y) * ow + xx];
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: dx,
    }
}

/// Concatenates `[C_i, H, W]` maps along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return dim_err(format!(
                "concat needs equal spatial extents, got {:?} and {:?}",
                first.shape, p.shape
            ));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor::new(&[channels, h, w], data)
}

/// Channels `[start, end)` of a `[C, H, W]` map.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if start > end || end > c {
        return dim_err(format!("channel slice {start}..{end} of {c}"));
    }
    Tensor::new(&[end - start, h, w], x.data[start * h * w..end * h * w].to_vec())
}

/// Softmax along the last axis of a rank-1 or rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let cols = match x.rank() {
        1 | 2 => *x.shape.last().unwrap(),
        _ => return dim_err(format!("softmax_rows on shape {:?}", x.shape)),
    };
    if cols == 0 {
        return dim_err("softmax over an empty row");
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(&x.shape, out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
