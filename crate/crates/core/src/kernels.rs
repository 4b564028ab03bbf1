//! Forward and backward numeric kernels on raw row-major buffers.
//!
//! Layouts: images and feature maps are `H × W × C`, convolution filters are
//! `K_h × K_w × C_in × C_out`. The tape in [`crate::autograd`] records calls
//! into these kernels; the analysis code calls them directly when no gradient
//! is needed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Output extent of a sliding window along one axis.
pub fn sliding_extent(len: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if window == 0 || stride == 0 || window > padded {
        return None;
    }
    Some((padded - window) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(filters, 4, "conv2d filters")?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, fcin, cout) = (
        filters.shape()[0],
        filters.shape()[1],
        filters.shape()[2],
        filters.shape()[3],
    );
    if fcin != cin {
        return Err(Error::InvalidShape(format!(
            "filter depth {fcin} does not match {cin} input channels"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "conv2d stride must be positive".into(),
        ));
    }
    let oh = sliding_extent(h, kh, stride, padding);
    let ow = sliding_extent(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            oh,
            ow,
        }),
        _ => Err(Error::InvalidShape(format!(
            "{kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"
        ))),
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Visits every (output position, filter tap, input position) triple that
/// falls inside the unpadded input.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for oy in 0..g.oh {
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            for ox in 0..g.ow {
                let out_pos = oy * g.ow + ox;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    f(out_pos, ky * g.kw + kx, iy as usize * g.w + ix as usize);
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, filters: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input, filters, stride, padding)?;
    let x = input.data();
    let wts = filters.data();
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for_each_tap(&g, |out_pos, tap, in_pos| {
        let o = &mut out[out_pos * g.cout..(out_pos + 1) * g.cout];
        let xin = &x[in_pos * g.cin..(in_pos + 1) * g.cin];
        for (ci, &v) in xin.iter().enumerate() {
            if v != 0.0 {
                let row = (tap * g.cin + ci) * g.cout;
                axpy(v, &wts[row..row + g.cout], o);
            }
        }
    });
    Tensor::new(vec![g.oh, g.ow, g.cout], out)
}

/// Gradients of a convolution with respect to its input and filters.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_filters: Option<&mut [f64]>,
) -> Result<()> {
    let g = conv_geometry(input, filters, stride, padding)?;
    let x = input.data();
    let wts = filters.data();
    for_each_tap(&g, |out_pos, tap, in_pos| {
        let go = &grad_out[out_pos * g.cout..(out_pos + 1) * g.cout];
        for ci in 0..g.cin {
            let row = (tap * g.cin + ci) * g.cout;
            if let Some(gi) = grad_input.as_deref_mut() {
                gi[in_pos * g.cin + ci] += dot(go, &wts[row..row + g.cout]);
            }
            if let Some(gf) = grad_filters.as_deref_mut() {
                let v = x[in_pos * g.cin + ci];
                if v != 0.0 {
                    axpy(v, go, &mut gf[row..row + g.cout]);
                }
            }
        }
    });
    Ok(())
}

/// Adds a per-channel bias to an `H × W × C` map.
pub fn bias_add(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(input, 3, "bias_add input")?;
    let c = input.shape()[2];
    if bias.numel() != c {
        return Err(Error::InvalidShape(format!(
            "bias of length {} for {c} channels",
            bias.numel()
        )));
    }
    let mut out = input.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for (v, b) in px.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Pooling extent: a sliding window, or the whole spatial map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Window { size: usize, stride: usize },
    Global,
}

/// Max pooling over an `H × W × C` map. Returns the pooled tensor and, for
/// every output element, the flat input index it was taken from (the first in
/// row-major order among ties).
pub fn max_pool(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(input, 3, "max_pool input")?;
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (size_h, size_w, stride) = match mode {
        PoolMode::Window { size, stride } => (size, size, stride),
        PoolMode::Global => (h, w, 1),
    };
    let (oh, ow) = match (
        sliding_extent(h, size_h, stride, 0),
        sliding_extent(w, size_w, stride, 0),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidShape(format!(
                "pool window {size_h}x{size_w}/{stride} does not fit {h}x{w}"
            )))
        }
    };
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * c;
            for dy in 0..size_h {
                for dx in 0..size_w {
                    let i = ((oy * stride + dy) * w + ox * stride + dx) * c;
                    for ch in 0..c {
                        if x[i + ch] > out[o + ch] {
                            out[o + ch] = x[i + ch];
                            arg[o + ch] = i + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

/// `weights (K × m) · input (m)`, never with a bias.
pub fn linear(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    expect_rank(weights, 2, "linear weights")?;
    let (k, m) = (weights.shape()[0], weights.shape()[1]);
    if input.numel() != m {
        return Err(Error::InvalidShape(format!(
            "linear weights {k}x{m} applied to input of length {}",
            input.numel()
        )));
    }
    let out = weights
        .data()
        .chunks_exact(m)
        .map(|row| dot(row, input.data()))
        .collect();
    Ok(Tensor::from_vec(out))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−log softmax(logits)[label]` via the log-sum-exp with max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

fn distance_geometry(z: &Tensor, p: &Tensor) -> Result<(usize, usize)> {
    expect_rank(z, 3, "latent")?;
    expect_rank(p, 3, "prototype")?;
    let (h, w, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let (h1, w1, d1) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    if d != d1 {
        return Err(Error::InvalidShape(format!(
            "prototype depth {d1} does not match latent depth {d}"
        )));
    }
    if h1 > h || w1 > w || h1 == 0 || w1 == 0 {
        return Err(Error::InvalidShape(format!(
            "prototype {h1}x{w1} does not fit latent {h}x{w}"
        )));
    }
    Ok((h - h1 + 1, w - w1 + 1))
}

/// Squared L2 distance between `p` and every `p`-sized window of `z`,
/// summed directly per patch.
pub fn l2_distance_map(z: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (oh, ow) = distance_geometry(z, p)?;
    let (w, d) = (z.shape()[1], z.shape()[2]);
    let (h1, w1) = (p.shape()[0], p.shape()[1]);
    let zd = z.data();
    let pd = p.data();
    let row_len = w1 * d;
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for dr in 0..h1 {
                let zs = ((r + dr) * w + c) * d;
                let ps = dr * row_len;
                for (a, b) in zd[zs..zs + row_len].iter().zip(&pd[ps..ps + row_len]) {
                    let diff = a - b;
                    acc += diff * diff;
                }
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// The same distance map computed as `‖z̃‖² − 2⟨z̃, p⟩ + ‖p‖²`, where the
/// cross term is a convolution with `p` as the single filter and the patch
/// norms are a convolution of `z ⊙ z` with an all-ones filter.
pub fn l2_distance_map_expanded(z: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (oh, ow) = distance_geometry(z, p)?;
    let (h1, w1, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let proto_filter = p.clone().reshape(&[h1, w1, d, 1])?;
    let cross = conv2d(z, &proto_filter, 1, 0)?;
    let squares = Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v * v).collect())?;
    let norms = conv2d(&squares, &Tensor::full(&[h1, w1, d, 1], 1.0), 1, 0)?;
    let p_norm: f64 = p.data().iter().map(|v| v * v).sum();
    let out = norms
        .data()
        .iter()
        .zip(cross.data())
        .map(|(n, x)| (n - 2.0 * x + p_norm).max(0.0))
        .collect();
    Tensor::new(vec![oh, ow], out)
}

/// Accumulates the gradients of [`l2_distance_map`].
pub(crate) fn l2_distance_map_backward(
    z: &Tensor,
    p: &Tensor,
    grad_out: &[f64],
    mut grad_z: Option<&mut [f64]>,
    mut grad_p: Option<&mut [f64]>,
) -> Result<()> {
    let (oh, ow) = distance_geometry(z, p)?;
    let (w, d) = (z.shape()[1], z.shape()[2]);
    let (h1, w1) = (p.shape()[0], p.shape()[1]);
    let zd = z.data();
    let pd = p.data();
    let row_len = w1 * d;
    for r in 0..oh {
        for c in 0..ow {
            let g = grad_out[r * ow + c];
            if g == 0.0 {
                continue;
            }
            for dr in 0..h1 {
                let zs = ((r + dr) * w + c) * d;
                let ps = dr * row_len;
                for t in 0..row_len {
                    let diff = 2.0 * g * (zd[zs + t] - pd[ps + t]);
                    if let Some(gz) = grad_z.as_deref_mut() {
                        gz[zs + t] += diff;
                    }
                    if let Some(gp) = grad_p.as_deref_mut() {
                        gp[ps + t] -= diff;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Index of the smallest value (first in order among ties).
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest value (first in order among ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
