//! Forward and backward rules for each layer kind.
//!
//! Activations are `[n, c, h, w]` tensors. Every forward returns whatever the
//! matching backward needs; parameter gradients are accumulated into the
//! caller's buffers.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Real, Tensor};
use crate::error::{NtlError, Result};
use crate::profile::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Valid destination range `[lo, hi)` when reading `src = dst + shift` in `0..len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).clamp(0, len as isize) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfold image `x` (`[cin, h, w]`) into rows `(ci, ky, kx)` of `col`; row
/// `r` occupies `col[r * ld + off..][..h * w]`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T], ld: usize, off: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (xlo, xhi) = valid_range(w, dx);
                let row = &mut col[((ci * k + ky) * k + kx) * ld + off..][..hw];
                row[..ylo * w].fill(T::zero());
                row[yhi * w..].fill(T::zero());
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    let s0 = (xlo as isize + dx) as usize;
                    dst[xlo..xhi].copy_from_slice(&plane[sy * w + s0..sy * w + s0 + (xhi - xlo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: fold `col` back, adding into `dx`.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, dx: &mut [T], ld: usize, off: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..k {
                let dxo = kx as isize - pad;
                let (xlo, xhi) = valid_range(w, dxo);
                let row = &col[((ci * k + ky) * k + kx) * ld + off..][..hw];
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let s0 = (xlo as isize + dxo) as usize;
                    let src = &row[y * w + xlo..y * w + xhi];
                    let dst = &mut plane[sy * w + s0..sy * w + s0 + (xhi - xlo)];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

/// `dst[c][r] = src[r][c]` for a row-major `rows × cols` source.
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Images per matrix product: small maps are batched so each product has
/// enough columns to run efficiently.
fn group_size(n: usize, hw: usize) -> usize {
    (GROUP_COLUMNS / hw).clamp(1, n.max(1))
}

const GROUP_COLUMNS: usize = 2048;

/// Lay a group of images out as `[kk, g * hw]` columns.
fn unfold_group<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, g: usize, col: &mut [T]) {
    let hw = h * w;
    let ld = g * hw;
    for j in 0..g {
        let xi = &x[j * cin * hw..(j + 1) * cin * hw];
        if k == 1 {
            for ci in 0..cin {
                col[ci * ld + j * hw..][..hw].copy_from_slice(&xi[ci * hw..(ci + 1) * hw]);
            }
        } else {
            im2col(xi, cin, h, w, k, col, ld, j * hw);
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, k: usize, layer: &str) -> Result<[usize; 5]> {
    let [n, cin, h, w] = x.dims4(layer)?;
    let cout = weight.shape.first().copied().unwrap_or(0);
    if weight.shape != [cout, cin, k, k] {
        return Err(NtlError::shape(
            layer,
            format!("kernel {:?} does not fit input channels {cin} with {k}x{k}", weight.shape),
        ));
    }
    Ok([n, cin, h, w, cout])
}

/// Stride-1 convolution with "same" zero padding; `k` is 1 or 3.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    k: usize,
    layer: &str,
) -> Result<Tensor<T>> {
    let [n, cin, h, w, cout] = check_conv(x, weight, k, layer)?;
    let hw = h * w;
    let kk = cin * k * k;
    let g = group_size(n, hw);
    let mut y = Tensor::zeros(&[n, cout, h, w]);
    let mut col = vec![T::zero(); kk * g * hw];
    let mut out = vec![T::zero(); cout * g * hw];
    for i0 in (0..n).step_by(g) {
        let gi = g.min(n - i0);
        let ld = gi * hw;
        unfold_group(&x.data[i0 * cin * hw..], cin, h, w, k, gi, &mut col);
        for (co, row) in out[..cout * ld].chunks_exact_mut(ld).enumerate() {
            row.fill(bias.data[co]);
        }
        T::gemm(cout, kk, ld, T::one(), &weight.data, kk as isize, 1, &col, ld as isize, 1, T::one(), &mut out, ld as isize, 1);
        for j in 0..gi {
            let yi = &mut y.data[(i0 + j) * cout * hw..(i0 + j + 1) * cout * hw];
            for (co, dst) in yi.chunks_exact_mut(hw).enumerate() {
                dst.copy_from_slice(&out[co * ld + j * hw..][..hw]);
            }
        }
    }
    Ok(y)
}

/// Returns the input gradient; kernel and bias gradients are added into
/// `dweight` and `dbias`.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    k: usize,
    dy: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
    layer: &str,
) -> Result<Tensor<T>> {
    let [n, cin, h, w, cout] = check_conv(x, weight, k, layer)?;
    if dy.shape != [n, cout, h, w] {
        return Err(NtlError::shape(layer, format!("upstream gradient {:?}", dy.shape)));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let g = group_size(n, hw);
    let mut dx = Tensor::zeros(&x.shape);
    let mut col = vec![T::zero(); kk * g * hw];
    let mut col_t = vec![T::zero(); kk * g * hw];
    let mut dcol = vec![T::zero(); kk * g * hw];
    let mut dyg = vec![T::zero(); cout * g * hw];
    for i0 in (0..n).step_by(g) {
        let gi = g.min(n - i0);
        let ld = gi * hw;
        for j in 0..gi {
            let dyi = &dy.data[(i0 + j) * cout * hw..(i0 + j + 1) * cout * hw];
            for (co, src) in dyi.chunks_exact(hw).enumerate() {
                dyg[co * ld + j * hw..][..hw].copy_from_slice(src);
                dbias.data[co] = dbias.data[co] + src.iter().fold(T::zero(), |a, &b| a + b);
            }
        }
        unfold_group(&x.data[i0 * cin * hw..], cin, h, w, k, gi, &mut col);
        transpose(&col[..kk * ld], kk, ld, &mut col_t);
        // dW[cout, kk] += dY[cout, ld] · colᵀ[ld, kk]
        T::gemm(cout, ld, kk, T::one(), &dyg, ld as isize, 1, &col_t, kk as isize, 1, T::one(), &mut dweight.data, kk as isize, 1);
        // dcol[kk, ld] = Wᵀ[kk, cout] · dY[cout, ld]
        T::gemm(kk, cout, ld, T::one(), &weight.data, 1, kk as isize, &dyg, ld as isize, 1, T::zero(), &mut dcol, ld as isize, 1);
        for j in 0..gi {
            let dxi = &mut dx.data[(i0 + j) * cin * hw..(i0 + j + 1) * cin * hw];
            if k == 1 {
                for ci in 0..cin {
                    dxi[ci * hw..(ci + 1) * hw].copy_from_slice(&dcol[ci * ld + j * hw..][..hw]);
                }
            } else {
                col2im(&dcol, cin, h, w, k, dxi, ld, j * hw);
            }
        }
    }
    Ok(dx)
}

pub fn lrelu_forward<T: Real>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::lit(alpha);
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| if v > T::zero() { v } else { a * v }).collect() }
}

/// Uses the forward output: with a positive slope its sign matches the input's.
pub fn lrelu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::lit(alpha);
    Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().zip(&dy.data).map(|(&v, &g)| if v > T::zero() { g } else { a * g }).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_bn<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, layer: &str) -> Result<[usize; 4]> {
    let d = x.dims4(layer)?;
    if gamma.shape != [d[1]] {
        return Err(NtlError::shape(layer, format!("scale {:?} vs {} channels", gamma.shape, d[1])));
    }
    Ok(d)
}

/// Batch normalization using statistics of the current batch (biased variance).
pub fn bn_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    layer: &str,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, h, w] = check_bn(x, gamma, layer)?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for (ch, plane) in x.data[i * c * hw..(i + 1) * c * hw].chunks_exact(hw).enumerate() {
            mean[ch] += plane.iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for i in 0..n {
        for (ch, plane) in x.data[i * c * hw..(i + 1) * c * hw].chunks_exact(hw).enumerate() {
            var[ch] += plane.iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&x.shape);
    let mut y = Tensor::zeros(&x.shape);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (mu, is) = (T::lit(mean[ch]), T::lit(inv_std[ch]));
            let (g, b) = (gamma.data[ch], beta.data[ch]);
            for j in off..off + hw {
                let xh = (x.data[j] - mu) * is;
                xhat.data[j] = xh;
                y.data[j] = g * xh + b;
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std, mean, var }))
}

pub fn bn_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    layer: &str,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_bn(x, gamma, layer)?;
    let hw = h * w;
    let mut y = Tensor::zeros(&x.shape);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let is = T::lit(1.0 / (running_var.data[ch].f64() + eps).sqrt());
            let scale = gamma.data[ch] * is;
            let shift = beta.data[ch] - running_mean.data[ch] * scale;
            for j in off..off + hw {
                y.data[j] = x.data[j] * scale + shift;
            }
        }
    }
    Ok(y)
}

pub fn bn_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
    layer: &str,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_bn(&cache.xhat, gamma, layer)?;
    if dy.shape != cache.xhat.shape {
        return Err(NtlError::shape(layer, format!("upstream gradient {:?}", dy.shape)));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                let g = dy.data[j].f64();
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * cache.xhat.data[j].f64();
            }
        }
    }
    let mut dx = Tensor::zeros(&dy.shape);
    for ch in 0..c {
        dgamma.data[ch] = dgamma.data[ch] + T::lit(sum_dy_xhat[ch]);
        dbeta.data[ch] = dbeta.data[ch] + T::lit(sum_dy[ch]);
    }
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let g = gamma.data[ch].f64();
            let k = g * cache.inv_std[ch] / m;
            let a = T::lit(k * m);
            let b = T::lit(k * sum_dy[ch]);
            let d = T::lit(k * sum_dy_xhat[ch]);
            for j in off..off + hw {
                dx.data[j] = a * dy.data[j] - b - d * cache.xhat.data[j];
            }
        }
    }
    Ok(dx)
}

/// 2×2 max pooling, stride 2; odd trailing rows/columns are dropped.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>, layer: &str) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.dims4(layer)?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(NtlError::shape(layer, format!("{h}x{w} is too small to pool")));
    }
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for idx in [2 * oy * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                y.data[o] = src[best];
                arg[o] = (p * h * w + best) as u32;
            }
        }
    }
    Ok((y, arg))
}

/// Routes each output gradient back to the input position it came from.
pub fn scatter_backward<T: Real>(argmax: &[u32], dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&a, &g) in argmax.iter().zip(&dy.data) {
        dx.data[a as usize] = dx.data[a as usize] + g;
    }
    dx
}

/// Inverted dropout: kept units are scaled by `1/(1-p)`. Returns the mask.
pub fn dropout_forward<T: Real, R: Rng>(x: &Tensor<T>, p: f64, rng: &mut R) -> (Tensor<T>, Vec<T>) {
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    let y = Tensor { shape: x.shape.clone(), data: x.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect() };
    (y, mask)
}

pub fn mask_backward<T: Real>(mask: &[T], dy: &Tensor<T>) -> Tensor<T> {
    Tensor { shape: dy.shape.clone(), data: dy.data.iter().zip(mask).map(|(&g, &m)| g * m).collect() }
}

/// Additive zero-mean Gaussian noise; the gradient passes through unchanged.
pub fn noise_forward<T: Real, R: Rng>(x: &Tensor<T>, sigma: f64, rng: &mut R) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| v + T::lit(sigma * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    }
}

/// `y[n, o] = Σ_d w[o, d]·x[n, d] + b[o]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
    let (n, d, o) = check_dense(x, weight, layer)?;
    let mut y = Tensor::zeros(&[n, o]);
    for row in y.data.chunks_exact_mut(o) {
        row.copy_from_slice(&bias.data);
    }
    T::gemm(n, d, o, T::one(), &x.data, d as isize, 1, &weight.data, 1, d as isize, T::one(), &mut y.data, o as isize, 1);
    Ok(y)
}

fn check_dense<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, layer: &str) -> Result<(usize, usize, usize)> {
    let (n, d) = match x.shape[..] {
        [n, d] => (n, d),
        _ => return Err(NtlError::shape(layer, format!("expected [n, d] input, got {:?}", x.shape))),
    };
    match weight.shape[..] {
        [o, wd] if wd == d => Ok((n, d, o)),
        _ => Err(NtlError::shape(layer, format!("weight {:?} vs input width {d}", weight.shape))),
    }
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
    layer: &str,
) -> Result<Tensor<T>> {
    let (n, d, o) = check_dense(x, weight, layer)?;
    if dy.shape != [n, o] {
        return Err(NtlError::shape(layer, format!("upstream gradient {:?}", dy.shape)));
    }
    for row in dy.data.chunks_exact(o) {
        for (db, &g) in dbias.data.iter_mut().zip(row) {
            *db = *db + g;
        }
    }
    // dW[o, d] += dYᵀ[o, n] · X[n, d]
    T::gemm(o, n, d, T::one(), &dy.data, 1, o as isize, &x.data, d as isize, 1, T::one(), &mut dweight.data, d as isize, 1);
    let mut dx = Tensor::zeros(&[n, d]);
    T::gemm(n, o, d, T::one(), &dy.data, o as isize, 1, &weight.data, d as isize, 1, T::zero(), &mut dx.data, d as isize, 1);
    Ok(dx)
}

/// Half-open cell range `[start, end)` of a pixel interval projected onto a
/// feature map of `fm` cells covering `input` pixels.
pub fn project_span(lo: u16, hi: u16, input: usize, fm: usize) -> (usize, usize) {
    let start = (lo as usize * fm / input).min(fm - 1);
    let end = ((hi as usize + 1) * fm).div_ceil(input).clamp(start + 1, fm);
    (start, end)
}

/// Bin `i` of `bins` over a span of `len` cells starting at `start`.
pub fn bin_span(start: usize, len: usize, i: usize, bins: usize) -> (usize, usize) {
    (start + i * len / bins, start + ((i + 1) * len).div_ceil(bins))
}

/// Max-pool each feature map's projected box into a fixed `out × out` grid.
pub fn roi_pool_forward<T: Real>(
    fm: &Tensor<T>,
    boxes: &[BBox],
    input_size: usize,
    out: usize,
    layer: &str,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let [m, f, s, s2] = fm.dims4(layer)?;
    if s != s2 || boxes.len() != m {
        return Err(NtlError::shape(layer, format!("map {:?} with {} boxes", fm.shape, boxes.len())));
    }
    let mut y = Tensor::zeros(&[m, f, out, out]);
    let mut arg = vec![0u32; m * f * out * out];
    for (i, b) in boxes.iter().enumerate() {
        let (x0, x1) = project_span(b.x0, b.x1, input_size, s);
        let (y0, y1) = project_span(b.y0, b.y1, input_size, s);
        for ch in 0..f {
            let base = (i * f + ch) * s * s;
            for by in 0..out {
                let (ry0, ry1) = bin_span(y0, y1 - y0, by, out);
                for bx in 0..out {
                    let (rx0, rx1) = bin_span(x0, x1 - x0, bx, out);
                    let mut best = base + ry0 * s + rx0;
                    for yy in ry0..ry1 {
                        for xx in rx0..rx1 {
                            let idx = base + yy * s + xx;
                            if fm.data[idx] > fm.data[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = ((i * f + ch) * out + by) * out + bx;
                    y.data[o] = fm.data[best];
                    arg[o] = best as u32;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape.last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
