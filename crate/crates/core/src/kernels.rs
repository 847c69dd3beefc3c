//! Forward and backward numeric kernels for the spatial operators.
//!
//! All feature maps are `[B, C, H, W]` row-major. Reductions accumulate in
//! `f64` in a fixed order.

use crate::fft::fft2_inplace;
use crate::tensor::{gemm, lit, Real};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const L2_EPS: f64 = 1e-12;

#[inline]
pub(crate) fn f<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap()
}

pub(crate) fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|&v| f(v)).sum()
}

// ---------------------------------------------------------------- pointwise conv

pub(crate) fn conv_pointwise_fwd<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    b: usize,
    cin: usize,
    cout: usize,
    hw: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); b * cout * hw];
    for bi in 0..b {
        let xs = &x[bi * cin * hw..(bi + 1) * cin * hw];
        let ys = &mut y[bi * cout * hw..(bi + 1) * cout * hw];
        gemm(cout, cin, hw, w, false, xs, false, ys, false);
        if let Some(bias) = bias {
            for (c, row) in ys.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`; `dx` only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_pointwise_bwd<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    b: usize,
    cin: usize,
    cout: usize,
    hw: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); cout * cin];
    let mut dx = want_dx.then(|| vec![T::zero(); b * cin * hw]);
    for bi in 0..b {
        let xs = &x[bi * cin * hw..(bi + 1) * cin * hw];
        let dys = &dy[bi * cout * hw..(bi + 1) * cout * hw];
        gemm(cout, hw, cin, dys, false, xs, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            gemm(cin, cout, hw, w, true, dys, false, &mut dx[bi * cin * hw..(bi + 1) * cin * hw], false);
        }
    }
    let db = channel_sums(dy, b, cout, hw);
    (dx, dw, db)
}

/// Sum over batch and spatial positions for each channel.
pub(crate) fn channel_sums<T: Real>(x: &[T], b: usize, c: usize, inner: usize) -> Vec<T> {
    (0..c)
        .map(|ci| {
            let mut acc = 0.0;
            for bi in 0..b {
                let off = (bi * c + ci) * inner;
                acc += sum_f64(&x[off..off + inner]);
            }
            lit(acc)
        })
        .collect()
}

// ---------------------------------------------------------------- 3x3 convolution

pub(crate) fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, stride: usize, col: &mut [T]) {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        col[row + oy * wo + ox] = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            T::zero()
                        } else {
                            x[(c * h + iy as usize) * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], cin: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dx[(c * h + iy as usize) * w + ix as usize];
                            *d = *d + col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_fwd<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    stride: usize,
) -> Vec<T> {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(wd, stride));
    let mut col = vec![T::zero(); cin * 9 * ho * wo];
    let mut y = vec![T::zero(); b * cout * ho * wo];
    for bi in 0..b {
        im2col(&x[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, stride, &mut col);
        let ys = &mut y[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        gemm(cout, cin * 9, ho * wo, w, false, &col, false, ys, false);
        if let Some(bias) = bias {
            for (c, row) in ys.chunks_mut(ho * wo).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_bwd<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    stride: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(wd, stride));
    let k = cin * 9;
    let mut col = vec![T::zero(); k * ho * wo];
    let mut dcol = vec![T::zero(); k * ho * wo];
    let mut dw = vec![T::zero(); cout * k];
    let mut dx = want_dx.then(|| vec![T::zero(); b * cin * h * wd]);
    for bi in 0..b {
        im2col(&x[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, stride, &mut col);
        let dys = &dy[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        gemm(cout, ho * wo, k, dys, false, &col, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            gemm(k, cout, ho * wo, w, true, dys, false, &mut dcol, false);
            col2im_add(&dcol, cin, h, wd, stride, &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd]);
        }
    }
    let db = channel_sums(dy, b, cout, ho * wo);
    (dx, dw, db)
}

// ---------------------------------------------------------------- depthwise 3x3

/// Valid output range along one axis for tap offset `d` in {-1, 0, 1}.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    match d {
        -1 => (1, n),
        1 => (0, n.saturating_sub(1)),
        _ => (0, n),
    }
}

pub(crate) fn dwconv3_fwd<T: Real>(x: &[T], w: &[T], bc: usize, c: usize, h: usize, wd: usize) -> Vec<T> {
    let mut y = vec![T::zero(); bc * h * wd];
    for p in 0..bc {
        let k = &w[(p % c) * 9..(p % c) * 9 + 9];
        let xs = &x[p * h * wd..(p + 1) * h * wd];
        let ys = &mut y[p * h * wd..(p + 1) * h * wd];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (r0, r1) = tap_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (c0, c1) = tap_range(wd, dx);
                let wt = k[ky * 3 + kx];
                if c1 <= c0 {
                    continue;
                }
                for i in r0..r1 {
                    let si = (i as isize + dy) as usize;
                    let src = &xs[si * wd + (c0 as isize + dx) as usize..si * wd + (c1 as isize + dx) as usize];
                    let dst = &mut ys[i * wd + c0..i * wd + c1];
                    dst.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + wt * s);
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv3_bwd<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    bc: usize,
    c: usize,
    h: usize,
    wd: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let mut dw = vec![0.0f64; c * 9];
    let mut dxs = want_dx.then(|| vec![T::zero(); bc * h * wd]);
    for p in 0..bc {
        let ch = p % c;
        let k = &w[ch * 9..ch * 9 + 9];
        let xs = &x[p * h * wd..(p + 1) * h * wd];
        let gs = &g[p * h * wd..(p + 1) * h * wd];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (r0, r1) = tap_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (c0, c1) = tap_range(wd, dx);
                if c1 <= c0 {
                    continue;
                }
                let wt = k[ky * 3 + kx];
                let mut acc = T::zero();
                for i in r0..r1 {
                    let si = (i as isize + dy) as usize;
                    let lo = si * wd + (c0 as isize + dx) as usize;
                    let hi = si * wd + (c1 as isize + dx) as usize;
                    let gsl = &gs[i * wd + c0..i * wd + c1];
                    let mut row = T::zero();
                    for (&gv, &xv) in gsl.iter().zip(&xs[lo..hi]) {
                        row = row + gv * xv;
                    }
                    acc = acc + row;
                    if let Some(dxs) = dxs.as_mut() {
                        let dst = &mut dxs[p * h * wd + lo..p * h * wd + hi];
                        dst.iter_mut().zip(gsl).for_each(|(o, &gv)| *o = *o + wt * gv);
                    }
                }
                dw[ch * 9 + ky * 3 + kx] += f(acc);
            }
        }
    }
    (dxs, dw.into_iter().map(lit).collect())
}

// ---------------------------------------------------------------- channel layer norm

/// Per-pixel mean and inverse standard deviation over the channel axis.
fn ln_stats<T: Real>(x: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); hw];
    for ci in 0..c {
        mean.iter_mut().zip(&x[ci * hw..(ci + 1) * hw]).for_each(|(m, &v)| *m = *m + v);
    }
    let inv_c = lit::<T>(1.0 / c as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv_c);
    let mut var = vec![T::zero(); hw];
    for ci in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(&x[ci * hw..(ci + 1) * hw]).zip(&mean) {
            let d = v - m;
            *s = *s + d * d;
        }
    }
    let eps = lit::<T>(LN_EPS);
    let inv = var.into_iter().map(|s| T::one() / (s * inv_c + eps).sqrt()).collect();
    (mean, inv)
}

pub(crate) fn layernorm_fwd<T: Real>(x: &[T], gamma: &[T], beta: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        let xs = &x[bi * c * hw..(bi + 1) * c * hw];
        let (mean, inv) = ln_stats(xs, c, hw);
        for ci in 0..c {
            let (g, bt) = (gamma[ci], beta[ci]);
            let off = (bi * c + ci) * hw;
            for p in 0..hw {
                y[off + p] = (xs[ci * hw + p] - mean[p]) * inv[p] * g + bt;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layernorm_bwd<T: Real>(
    x: &[T],
    gamma: &[T],
    g: &[T],
    b: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let inv_c = lit::<T>(1.0 / c as f64);
    for bi in 0..b {
        let xs = &x[bi * c * hw..(bi + 1) * c * hw];
        let gs = &g[bi * c * hw..(bi + 1) * c * hw];
        let (mean, inv) = ln_stats(xs, c, hw);
        let mut m1 = vec![T::zero(); hw];
        let mut m2 = vec![T::zero(); hw];
        for ci in 0..c {
            let mut dga = 0.0;
            for p in 0..hw {
                let xh = (xs[ci * hw + p] - mean[p]) * inv[p];
                let gy = gs[ci * hw + p];
                dga += f(gy * xh);
                let dxh = gy * gamma[ci];
                m1[p] = m1[p] + dxh;
                m2[p] = m2[p] + dxh * xh;
            }
            dgamma[ci] += dga;
            dbeta[ci] += sum_f64(&gs[ci * hw..(ci + 1) * hw]);
        }
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for p in 0..hw {
                let xh = (xs[ci * hw + p] - mean[p]) * inv[p];
                let dxh = gs[ci * hw + p] * gamma[ci];
                dx[off + p] = inv[p] * (dxh - m1[p] * inv_c - xh * m2[p] * inv_c);
            }
        }
    }
    (dx, dgamma.into_iter().map(lit).collect(), dbeta.into_iter().map(lit).collect())
}

// ---------------------------------------------------------------- softmax

pub(crate) fn softmax_fwd<T: Real>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(x[base + k * inner]);
            }
            let mut sum = T::zero();
            for k in 0..n {
                let e = (x[base + k * inner] - mx).exp();
                y[base + k * inner] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for k in 0..n {
                y[base + k * inner] = y[base + k * inner] * inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_bwd<T: Real>(y: &[T], g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for k in 0..n {
                dot = dot + g[base + k * inner] * y[base + k * inner];
            }
            for k in 0..n {
                let idx = base + k * inner;
                dx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- l2 normalize

pub(crate) fn l2norm_fwd<T: Real>(x: &[T], len: usize) -> Vec<T> {
    let eps = lit::<T>(L2_EPS);
    let mut y = x.to_vec();
    for row in y.chunks_mut(len) {
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps);
        row.iter_mut().for_each(|v| *v = *v / n);
    }
    y
}

pub(crate) fn l2norm_bwd<T: Real>(x: &[T], g: &[T], len: usize) -> Vec<T> {
    let eps = lit::<T>(L2_EPS);
    let mut dx = vec![T::zero(); x.len()];
    for ((xr, gr), dr) in x.chunks(len).zip(g.chunks(len)).zip(dx.chunks_mut(len)) {
        let raw = xr.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        let n = raw.max(eps);
        if raw < eps {
            dr.iter_mut().zip(gr).for_each(|(d, &gv)| *d = gv / n);
            continue;
        }
        let dot = xr.iter().zip(gr).fold(T::zero(), |a, (&xv, &gv)| a + xv * gv) / n;
        for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
            *d = (gv - xv / n * dot) / n;
        }
    }
    dx
}

// ---------------------------------------------------------------- fft2

/// Forward 2-D DFT of each plane; output is `[2, planes, h, w]` (real then imaginary).
pub(crate) fn fft2_fwd<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let n = planes * h * w;
    let mut out = vec![T::zero(); 2 * n];
    let (re, im) = out.split_at_mut(n);
    re.copy_from_slice(x);
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        fft2_inplace(&mut re[r.clone()], &mut im[r], h, w);
    }
    out
}

/// Adjoint of [`fft2_fwd`] for real input: `dx = Re(FFT2(g_re - i g_im))`.
pub(crate) fn fft2_bwd<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let n = planes * h * w;
    let mut re = g[..n].to_vec();
    let mut im: Vec<T> = g[n..].iter().map(|&v| -v).collect();
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        fft2_inplace(&mut re[r.clone()], &mut im[r], h, w);
    }
    re
}

// ---------------------------------------------------------------- pixel (un)shuffle

/// `[B,C,H,W] -> [B,C*r*r,H/r,W/r]`, channel `c*r*r + dy*r + dx`.
pub(crate) fn unshuffle<T: Real>(x: &[T], b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ci * r * r + dy * r + dx;
                    let obase = (bi * c * r * r + oc) * ho * wo;
                    for i in 0..ho {
                        let ibase = ((bi * c + ci) * h + i * r + dy) * w + dx;
                        for j in 0..wo {
                            y[obase + i * wo + j] = x[ibase + j * r];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Inverse of [`unshuffle`]; `c` is the output channel count.
pub(crate) fn shuffle<T: Real>(y: &[T], b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut x = vec![T::zero(); y.len()];
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ci * r * r + dy * r + dx;
                    let obase = (bi * c * r * r + oc) * ho * wo;
                    for i in 0..ho {
                        let ibase = ((bi * c + ci) * h + i * r + dy) * w + dx;
                        for j in 0..wo {
                            x[ibase + j * r] = y[obase + i * wo + j];
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------- misc layout

/// Swaps the last two axes of a `[batch, m, n]` buffer.
pub(crate) fn transpose_last2<T: Real>(x: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let xs = &x[bi * m * n..(bi + 1) * m * n];
        let ys = &mut y[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                ys[j * m + i] = xs[i * n + j];
            }
        }
    }
    y
}

/// Strides of `shape` with broadcast (size-1) axes given stride zero.
pub(crate) fn broadcast_strides(target: &[usize], src: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 && target[d] != 1 { 0 } else { acc };
        acc *= src[d];
    }
    strides
}

/// Maps each flat index of `target` to the flat index in the broadcast source.
pub(crate) fn broadcast_index_map(target: &[usize], src: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(target, src);
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let x: Vec<f32> = (0..2 * 5 * 4).map(|i| i as f32 * 0.1).collect();
        let mut w = vec![0.0f32; 18];
        w[4] = 1.0;
        w[13] = 1.0;
        assert_eq!(dwconv3_fwd(&x, &w, 2, 2, 5, 4), x);
    }

    #[test]
    fn conv3x3_stride2_shape() {
        assert_eq!(conv_out_dim(16, 2), 8);
        assert_eq!(conv_out_dim(15, 2), 8);
        assert_eq!(conv_out_dim(16, 1), 16);
    }

    #[test]
    fn broadcast_map_rows() {
        assert_eq!(broadcast_index_map(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }
}
