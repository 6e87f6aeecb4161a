//! Forward and backward kernels on raw buffers.
//!
//! The tape in [`super::tape`] owns the bookkeeping; everything here is a pure
//! function of its inputs. Work is split per sample (or in fixed-size sample
//! chunks for weight-gradient reductions) so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Samples per partial sum when reducing weight gradients over a batch.
const REDUCE_CHUNK: usize = 8;

/// `(N, C, inner)` view of a tensor whose axis 1 is the channel axis.
pub(crate) fn channel_view(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        &[n, c] => Ok((n, c, 1)),
        &[n, c, h, w] => Ok((n, c, h * w)),
        other => Err(Error::shape(op, format!("expected 2-D or 4-D, got {other:?}"))),
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn ensure_len(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Group norm with a single group

/// Per-sample statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Normalizes each sample over all of `C·H·W`, then applies per-channel
/// `gamma`/`beta`.
///
/// The mean is accumulated relative to the sample's first element so a
/// constant sample yields exactly zero deviation. With `eps == 0` and zero
/// variance the normalized value is defined as 0.
pub fn group_norm_1(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<(Tensor, NormStats)> {
    let (n, c, inner) = channel_view(x.shape(), "group_norm_1")?;
    if x.rank() != 4 {
        return Err(Error::shape("group_norm_1", "input must be 4-D"));
    }
    ensure_len("group_norm_1", "gamma", gamma.len(), c)?;
    ensure_len("group_norm_1", "beta", beta.len(), c)?;
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("group_norm_1 eps must be >= 0, got {eps}")));
    }
    let per = c * inner;
    let mut out = vec![0.0f32; x.numel()];
    let mut mean = vec![0.0f32; n];
    let mut rstd = vec![0.0f32; n];
    out.par_chunks_mut(per.max(1))
        .zip(x.data().par_chunks(per.max(1)))
        .zip(mean.par_iter_mut().zip(rstd.par_iter_mut()))
        .for_each(|((o, xs), (mu_out, rs_out))| {
            let (mu, rs) = sample_stats(xs, eps);
            *mu_out = mu as f32;
            *rs_out = rs as f32;
            for ch in 0..c {
                let (g, b) = (gamma[ch] as f64, beta[ch] as f64);
                let range = ch * inner..(ch + 1) * inner;
                for (y, &v) in o[range.clone()].iter_mut().zip(&xs[range]) {
                    *y = (g * ((v as f64 - mu) * rs) + b) as f32;
                }
            }
        });
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormStats { mean, rstd }))
}

fn sample_stats(xs: &[f32], eps: f32) -> (f64, f64) {
    let m = xs.len() as f64;
    let pivot = xs[0] as f64;
    let shift: f64 = xs.iter().map(|&v| v as f64 - pivot).sum();
    let mu = pivot + shift / m;
    let var = xs
        .iter()
        .map(|&v| {
            let d = v as f64 - mu;
            d * d
        })
        .sum::<f64>()
        / m;
    let denom = var + eps as f64;
    let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    (mu, rs)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_1_backward(
    x: &Tensor,
    gamma: &[f32],
    stats: &NormStats,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, inner) = channel_view(x.shape(), "group_norm_1").expect("validated in forward");
    let per = c * inner;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        let xs = &x.data()[s * per..(s + 1) * per];
        let g = &dy[s * per..(s + 1) * per];
        let (mu, rs) = (stats.mean[s], stats.rstd[s]);
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for ch in 0..c {
            for i in ch * inner..(ch + 1) * inner {
                let xhat = (xs[i] - mu) * rs;
                dgamma[ch] += (g[i] * xhat) as f64;
                dbeta[ch] += g[i] as f64;
                let dxhat = (g[i] * gamma[ch]) as f64;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat as f64;
            }
        }
        let m = per as f64;
        let mean_dxhat = sum_dxhat / m;
        let mean_dxhat_xhat = sum_dxhat_xhat / m;
        let out = &mut dx[s * per..(s + 1) * per];
        for ch in 0..c {
            for i in ch * inner..(ch + 1) * inner {
                let xhat = ((xs[i] - mu) * rs) as f64;
                let dxhat = (g[i] * gamma[ch]) as f64;
                out[i] = (rs as f64 * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}

// ---------------------------------------------------------------------------
// Same-size average pooling

fn pool_window(pos: usize, extent: usize, half: usize) -> (usize, usize) {
    (pos.saturating_sub(half), (pos + half + 1).min(extent))
}

/// Stride-1 `k×k` mean over the in-image part of each window.
///
/// Computed as `x_p + mean(x_j - x_p)`, which is algebraically the plain
/// window mean but returns `x_p` bit-exactly on constant neighbourhoods.
pub fn avg_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("pool size must be odd and >= 1, got {k}")));
    }
    let half = k / 2;
    let plane = h * w;
    let mut out = vec![0.0f32; x.numel()];
    out.par_chunks_mut(plane.max(1))
        .zip(x.data().par_chunks(plane.max(1)))
        .for_each(|(o, xs)| {
            for y in 0..h {
                let (y0, y1) = pool_window(y, h, half);
                for xx in 0..w {
                    let (x0, x1) = pool_window(xx, w, half);
                    let centre = xs[y * w + xx];
                    let mut acc = 0.0f32;
                    for yy in y0..y1 {
                        for xw in x0..x1 {
                            acc += xs[yy * w + xw] - centre;
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f32;
                    o[y * w + xx] = centre + acc / count;
                }
            }
        });
    Tensor::new(x.shape().to_vec(), out)
}

pub fn avg_pool_same_backward(shape: &[usize], k: usize, dy: &[f32]) -> Vec<f32> {
    let (h, w) = (shape[2], shape[3]);
    let half = k / 2;
    let plane = h * w;
    let mut dx = vec![0.0f32; dy.len()];
    dx.par_chunks_mut(plane.max(1))
        .zip(dy.par_chunks(plane.max(1)))
        .for_each(|(d, g)| {
            for y in 0..h {
                let (y0, y1) = pool_window(y, h, half);
                for xx in 0..w {
                    let (x0, x1) = pool_window(xx, w, half);
                    let share = g[y * w + xx] / ((y1 - y0) * (x1 - x0)) as f32;
                    for yy in y0..y1 {
                        for xw in x0..x1 {
                            d[yy * w + xw] += share;
                        }
                    }
                }
            }
        });
    dx
}

// ---------------------------------------------------------------------------
// Strided convolution (patch embedding)

/// Geometry of a square-kernel convolution with edge-replicating padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return Err(Error::invalid(format!(
                "convolution {self:?} does not fit input extent {input}"
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn clamp_index(pos: isize, extent: usize) -> usize {
    pos.clamp(0, extent as isize - 1) as usize
}

fn im2col(xs: &[f32], c: usize, h: usize, w: usize, geo: ConvGeometry, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = geo.kernel;
    let opix = oh * ow;
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * opix..(row + 1) * opix];
                for oy in 0..oh {
                    let iy = clamp_index((oy * geo.stride + ky) as isize - geo.padding as isize, h);
                    for ox in 0..ow {
                        let ix = clamp_index((ox * geo.stride + kx) as isize - geo.padding as isize, w);
                        dst[oy * ow + ox] = plane[iy * w + ix];
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, geo: ConvGeometry, oh: usize, ow: usize, dx: &mut [f32]) {
    let k = geo.kernel;
    let opix = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * opix..(row + 1) * opix];
                for oy in 0..oh {
                    let iy = clamp_index((oy * geo.stride + ky) as isize - geo.padding as isize, h);
                    for ox in 0..ow {
                        let ix = clamp_index((ox * geo.stride + kx) as isize - geo.padding as isize, w);
                        plane[iy * w + ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// `x (N,Ci,H,W) * w (Co,Ci,k,k) + b (Co)` with edge-replicating padding.
///
/// Replicated borders keep a spatially constant input spatially constant
/// after the convolution.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &[f32], geo: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c || kh != geo.kernel || kw != geo.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("weight {:?} vs input channels {c}, kernel {}", weight.shape(), geo.kernel),
        ));
    }
    ensure_len("conv2d", "bias", bias.len(), co)?;
    let (oh, ow) = (geo.output_extent(h)?, geo.output_extent(w)?);
    let opix = oh * ow;
    let krows = c * geo.kernel * geo.kernel;
    let mut out = vec![0.0f32; n * co * opix];
    out.par_chunks_mut((co * opix).max(1))
        .zip(x.data().par_chunks((c * h * w).max(1)))
        .for_each(|(o, xs)| {
            let mut cols = vec![0.0f32; krows * opix];
            im2col(xs, c, h, w, geo, oh, ow, &mut cols);
            gemm(co, krows, opix, weight.data(), Layout::Plain, &cols, Layout::Plain, o, false);
            add_channel_bias(o, bias, opix);
        });
    Tensor::new(vec![n, co, oh, ow], out)
}

fn add_channel_bias(o: &mut [f32], bias: &[f32], inner: usize) {
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut o[ch * inner..(ch + 1) * inner] {
            *v += b;
        }
    }
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    geo: ConvGeometry,
    out_shape: &[usize],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dims4().expect("validated in forward");
    let (co, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let opix = oh * ow;
    let krows = c * geo.kernel * geo.kernel;
    let in_per = c * h * w;
    let out_per = co * opix;

    let mut dx = vec![0.0f32; x.numel()];
    dx.par_chunks_mut(in_per.max(1))
        .zip(dy.par_chunks(out_per.max(1)))
        .for_each(|(d, g)| {
            let mut dcols = vec![0.0f32; krows * opix];
            gemm(krows, co, opix, weight.data(), Layout::Transposed, g, Layout::Plain, &mut dcols, false);
            col2im(&dcols, c, h, w, geo, oh, ow, d);
        });

    let partials: Vec<Vec<f32>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|samples| {
            let mut dw = vec![0.0f32; co * krows];
            let mut cols = vec![0.0f32; krows * opix];
            for &s in samples {
                im2col(&x.data()[s * in_per..(s + 1) * in_per], c, h, w, geo, oh, ow, &mut cols);
                let g = &dy[s * out_per..(s + 1) * out_per];
                gemm(co, opix, krows, g, Layout::Plain, &cols, Layout::Transposed, &mut dw, true);
            }
            dw
        })
        .collect();
    let dweight = sum_partials(partials, co * krows);
    let dbias = channel_sums(dy, n, co, opix);
    (dx, dweight, dbias)
}

fn sum_partials(partials: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; len];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

fn channel_sums(dy: &[f32], n: usize, c: usize, inner: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            acc[ch] += dy[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

// ---------------------------------------------------------------------------
// Channel-mixing maps

/// 1×1 convolution: `y[n, :, p] = W · x[n, :, p] + b`, with `W` shaped `(Co, Ci)`.
pub fn pointwise(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci) = weight.dims2()?;
    if ci != c {
        return Err(Error::shape(
            "pointwise",
            format!("weight {:?} vs input channels {c}", weight.shape()),
        ));
    }
    ensure_len("pointwise", "bias", bias.len(), co)?;
    let pix = h * w;
    let mut out = vec![0.0f32; n * co * pix];
    out.par_chunks_mut((co * pix).max(1))
        .zip(x.data().par_chunks((c * pix).max(1)))
        .for_each(|(o, xs)| {
            gemm(co, c, pix, weight.data(), Layout::Plain, xs, Layout::Plain, o, false);
            add_channel_bias(o, bias, pix);
        });
    Tensor::new(vec![n, co, h, w], out)
}

pub fn pointwise_backward(x: &Tensor, weight: &Tensor, dy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dims4().expect("validated in forward");
    let (co, _) = weight.dims2().expect("validated in forward");
    let pix = h * w;
    let mut dx = vec![0.0f32; x.numel()];
    dx.par_chunks_mut((c * pix).max(1))
        .zip(dy.par_chunks((co * pix).max(1)))
        .for_each(|(d, g)| {
            gemm(c, co, pix, weight.data(), Layout::Transposed, g, Layout::Plain, d, false);
        });
    let partials: Vec<Vec<f32>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|samples| {
            let mut dw = vec![0.0f32; co * c];
            for &s in samples {
                let g = &dy[s * co * pix..(s + 1) * co * pix];
                let xs = &x.data()[s * c * pix..(s + 1) * c * pix];
                gemm(co, pix, c, g, Layout::Plain, xs, Layout::Transposed, &mut dw, true);
            }
            dw
        })
        .collect();
    let dweight = sum_partials(partials, co * c);
    let dbias = channel_sums(dy, n, co, pix);
    (dx, dweight, dbias)
}

/// `y = x · Wᵀ + b` for `x (N, Ci)` and `W (Co, Ci)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    let (co, ci) = weight.dims2()?;
    if ci != c {
        return Err(Error::shape(
            "linear",
            format!("weight {:?} vs input features {c}", weight.shape()),
        ));
    }
    ensure_len("linear", "bias", bias.len(), co)?;
    let mut out = vec![0.0f32; n * co];
    gemm(n, c, co, x.data(), Layout::Plain, weight.data(), Layout::Transposed, &mut out, false);
    for row in out.chunks_mut(co.max(1)) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Tensor::new(vec![n, co], out)
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c) = x.dims2().expect("validated in forward");
    let (co, _) = weight.dims2().expect("validated in forward");
    let mut dx = vec![0.0f32; n * c];
    gemm(n, co, c, dy, Layout::Plain, weight.data(), Layout::Plain, &mut dx, false);
    let mut dw = vec![0.0f32; co * c];
    gemm(co, n, c, dy, Layout::Transposed, x.data(), Layout::Plain, &mut dw, false);
    let dbias = channel_sums(dy, n, co, 1);
    (dx, dw, dbias)
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearity

const FRAC_1_SQRT_2PI: f32 = 0.398_942_3;

pub fn gelu(v: f32) -> f32 {
    0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(v: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
    cdf + v * pdf
}

// ---------------------------------------------------------------------------
// Row-wise distributions over the last axis of a 2-D tensor

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, k) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, k) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Token relation matrices

/// Guard added to token norms before division.
pub const RELATION_NORM_EPS: f32 = 1e-12;

/// Per sample, treats `x (N,C,H,W)` as `HW` tokens of width `C`, normalizes
/// each token to unit L2 norm and returns the `(N, HW, HW)` Gram matrix.
/// The second value holds the token norms for the backward pass.
pub fn relation_matrix(x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let (n, c, h, w) = x.dims4()?;
    let pix = h * w;
    let mut norms = vec![0.0f32; n * pix];
    let mut out = vec![0.0f32; n * pix * pix];
    for s in 0..n {
        let xs = &x.data()[s * c * pix..(s + 1) * c * pix];
        let (unit, ns) = unit_tokens(xs, c, pix);
        norms[s * pix..(s + 1) * pix].copy_from_slice(&ns);
        gemm(
            pix,
            c,
            pix,
            &unit,
            Layout::Transposed,
            &unit,
            Layout::Plain,
            &mut out[s * pix * pix..(s + 1) * pix * pix],
            false,
        );
    }
    Ok((Tensor::new(vec![n, pix, pix], out)?, norms))
}

/// Channel-major `(C, HW)` unit tokens and the raw token norms.
fn unit_tokens(xs: &[f32], c: usize, pix: usize) -> (Vec<f32>, Vec<f32>) {
    let mut norms = vec![0.0f32; pix];
    for ch in 0..c {
        for p in 0..pix {
            let v = xs[ch * pix + p];
            norms[p] += v * v;
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt();
    }
    let mut unit = xs.to_vec();
    for ch in 0..c {
        for p in 0..pix {
            unit[ch * pix + p] /= norms[p] + RELATION_NORM_EPS;
        }
    }
    (unit, norms)
}

pub fn relation_matrix_backward(x: &Tensor, norms: &[f32], dy: &[f32]) -> Vec<f32> {
    let (n, c, h, w) = x.dims4().expect("validated in forward");
    let pix = h * w;
    let mut dx = vec![0.0f32; x.numel()];
    for s in 0..n {
        let xs = &x.data()[s * c * pix..(s + 1) * c * pix];
        let (unit, _) = unit_tokens(xs, c, pix);
        let g = &dy[s * pix * pix..(s + 1) * pix * pix];
        let mut sym = vec![0.0f32; pix * pix];
        for i in 0..pix {
            for j in 0..pix {
                sym[i * pix + j] = g[i * pix + j] + g[j * pix + i];
            }
        }
        let mut dunit = vec![0.0f32; c * pix];
        gemm(c, pix, pix, &unit, Layout::Plain, &sym, Layout::Plain, &mut dunit, false);
        let d = &mut dx[s * c * pix..(s + 1) * c * pix];
        let ns = &norms[s * pix..(s + 1) * pix];
        for p in 0..pix {
            let nrm = ns[p];
            let denom = nrm + RELATION_NORM_EPS;
            let dot: f32 = (0..c).map(|ch| xs[ch * pix + p] * dunit[ch * pix + p]).sum();
            let radial = if nrm > 0.0 { dot / (nrm * denom * denom) } else { 0.0 };
            for ch in 0..c {
                d[ch * pix + p] = dunit[ch * pix + p] / denom - xs[ch * pix + p] * radial;
            }
        }
    }
    dx
}
