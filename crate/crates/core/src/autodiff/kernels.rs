//! Slice-level forward and backward kernels behind the graph primitives.
//!
//! Layouts are row-major; image-like tensors are `[batch, height, width, channels]`.

use crate::tensor::Real;

/// Geometry of a 2D convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// `c[m, n] = a[m, k] · b[k, n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), &mut c);
    c
}

/// Accumulates `ga += g · bᵀ` and `gb += aᵀ · g`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    ga: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(ga) = ga {
        T::gemm_acc(m, n, k, g, (n, 1), b, (1, n), ga);
    }
    if let Some(gb) = gb {
        T::gemm_acc(k, m, n, a, (1, k), g, (n, 1), gb);
    }
}

/// Dense convolution, weight layout `[kh, kw, in_c, out_c]`.
pub fn conv2d<T: Real>(x: &[T], w: &[T], geo: &ConvGeom) -> Vec<T> {
    let ConvGeom { batch, in_h, in_w, in_c, out_h, out_w, out_c, kh, kw, .. } = *geo;
    let mut out = vec![T::zero(); batch * out_h * out_w * out_c];
    for bi in 0..batch {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let o0 = ((bi * out_h + oh) * out_w + ow) * out_c;
                let orow = &mut out[o0..o0 + out_c];
                for ky in 0..kh {
                    let Some(ih) = geo.src(oh, ky, in_h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = geo.src(ow, kx, in_w) else { continue };
                        let x0 = ((bi * in_h + ih) * in_w + iw) * in_c;
                        let w0 = (ky * kw + kx) * in_c * out_c;
                        for ci in 0..in_c {
                            let xv = x[x0 + ci];
                            let wrow = &w[w0 + ci * out_c..w0 + (ci + 1) * out_c];
                            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    geo: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let ConvGeom { batch, in_h, in_w, in_c, out_h, out_w, out_c, kh, kw, .. } = *geo;
    for bi in 0..batch {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let o0 = ((bi * out_h + oh) * out_w + ow) * out_c;
                let grow = &g[o0..o0 + out_c];
                for ky in 0..kh {
                    let Some(ih) = geo.src(oh, ky, in_h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = geo.src(ow, kx, in_w) else { continue };
                        let x0 = ((bi * in_h + ih) * in_w + iw) * in_c;
                        let w0 = (ky * kw + kx) * in_c * out_c;
                        for ci in 0..in_c {
                            let wr = w0 + ci * out_c..w0 + (ci + 1) * out_c;
                            if let Some(gx) = gx.as_deref_mut() {
                                let mut s = T::zero();
                                for (&gv, &wv) in grow.iter().zip(&w[wr.clone()]) {
                                    s += gv * wv;
                                }
                                gx[x0 + ci] += s;
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                let xv = x[x0 + ci];
                                for (gwv, &gv) in gw[wr].iter_mut().zip(grow) {
                                    *gwv += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, weight layout `[kh, kw, channels]`.
pub fn depthwise<T: Real>(x: &[T], w: &[T], geo: &ConvGeom) -> Vec<T> {
    let ConvGeom { batch, in_h, in_w, in_c: c, out_h, out_w, kh, kw, .. } = *geo;
    let mut out = vec![T::zero(); batch * out_h * out_w * c];
    for bi in 0..batch {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let o0 = ((bi * out_h + oh) * out_w + ow) * c;
                for ky in 0..kh {
                    let Some(ih) = geo.src(oh, ky, in_h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = geo.src(ow, kx, in_w) else { continue };
                        let x0 = ((bi * in_h + ih) * in_w + iw) * c;
                        let w0 = (ky * kw + kx) * c;
                        let orow = &mut out[o0..o0 + c];
                        for ((ov, &xv), &wv) in orow.iter_mut().zip(&x[x0..x0 + c]).zip(&w[w0..w0 + c]) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    geo: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let ConvGeom { batch, in_h, in_w, in_c: c, out_h, out_w, kh, kw, .. } = *geo;
    for bi in 0..batch {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let o0 = ((bi * out_h + oh) * out_w + ow) * c;
                let grow = &g[o0..o0 + c];
                for ky in 0..kh {
                    let Some(ih) = geo.src(oh, ky, in_h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = geo.src(ow, kx, in_w) else { continue };
                        let x0 = ((bi * in_h + ih) * in_w + iw) * c;
                        let w0 = (ky * kw + kx) * c;
                        if let Some(gx) = gx.as_deref_mut() {
                            for ((gxv, &gv), &wv) in gx[x0..x0 + c].iter_mut().zip(grow).zip(&w[w0..w0 + c]) {
                                *gxv += gv * wv;
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            for ((gwv, &gv), &xv) in gw[w0..w0 + c].iter_mut().zip(grow).zip(&x[x0..x0 + c]) {
                                *gwv += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Normalizes each row of a `[rows, width]` buffer; returns `(xhat, rstd per row)`.
pub fn normalize_rows<T: Real>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let inv_n = T::one() / T::c(width as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let s = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        rstd.push(s);
    }
    (out, rstd)
}

/// Backward of row normalization: `gx = rstd·(g − mean(g) − xhat·mean(g·xhat))`.
pub fn normalize_rows_backward<T: Real>(xhat: &[T], rstd: &[T], g: &[T], width: usize, gx: &mut [T]) {
    let inv_n = T::one() / T::c(width as f64);
    for (r, &s) in rstd.iter().enumerate() {
        let span = r * width..(r + 1) * width;
        let (xr, gr) = (&xhat[span.clone()], &g[span.clone()]);
        let mg = gr.iter().copied().sum::<T>() * inv_n;
        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((o, &gv), &xv) in gx[span].iter_mut().zip(gr).zip(xr) {
            *o += s * (gv - mg - xv * mgx);
        }
    }
}

/// Per-channel statistics over all leading positions of a `[.., channels]` buffer.
/// Returns `(xhat, rstd, mean, biased variance)`, each statistic of length `channels`.
pub fn normalize_channels<T: Real>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / channels;
    let inv_n = T::one() / T::c(rows as f64);
    let mut mean = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for (orow, row) in out.chunks_exact_mut(channels).zip(x.chunks_exact(channels)) {
        for c in 0..channels {
            orow[c] = (row[c] - mean[c]) * rstd[c];
        }
    }
    (out, rstd, mean, var)
}

pub fn normalize_channels_backward<T: Real>(xhat: &[T], rstd: &[T], g: &[T], channels: usize, gx: &mut [T]) {
    let rows = xhat.len() / channels;
    let inv_n = T::one() / T::c(rows as f64);
    let mut mg = vec![T::zero(); channels];
    let mut mgx = vec![T::zero(); channels];
    for (gr, xr) in g.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            mg[c] += gr[c];
            mgx[c] += gr[c] * xr[c];
        }
    }
    for c in 0..channels {
        mg[c] *= inv_n;
        mgx[c] *= inv_n;
    }
    for ((o, gr), xr) in gx.chunks_exact_mut(channels).zip(g.chunks_exact(channels)).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            o[c] += rstd[c] * (gr[c] - mg[c] - xr[c] * mgx[c]);
        }
    }
}

/// Sampling table for one axis of a half-pixel-centred bilinear resize.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut taps = AxisTaps { lo: Vec::with_capacity(output), hi: Vec::with_capacity(output), frac: Vec::with_capacity(output) };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
        }
        taps
    }
}

/// Bilinear resize of `[batch, h, w, c]` to `[batch, oh, ow, c]`.
///
/// Interpolates as `v0 + t·(v1 − v0)` so constant regions are reproduced exactly.
pub fn resize_bilinear<T: Real>(x: &[T], batch: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let (ty, tx) = (AxisTaps::new(h, oh), AxisTaps::new(w, ow));
    let mut out = vec![T::zero(); batch * oh * ow * c];
    let at = |b: usize, y: usize, xx: usize| ((b * h + y) * w + xx) * c;
    for b in 0..batch {
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::c(ty.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::c(tx.frac[ox]));
                let (p00, p01, p10, p11) = (at(b, y0, x0), at(b, y0, x1), at(b, y1, x0), at(b, y1, x1));
                let o0 = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let top = x[p00 + ch] + fx * (x[p01 + ch] - x[p00 + ch]);
                    let bot = x[p10 + ch] + fx * (x[p11 + ch] - x[p10 + ch]);
                    out[o0 + ch] = top + fy * (bot - top);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn resize_bilinear_backward<T: Real>(
    g: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    let (ty, tx) = (AxisTaps::new(h, oh), AxisTaps::new(w, ow));
    let at = |b: usize, y: usize, xx: usize| ((b * h + y) * w + xx) * c;
    for b in 0..batch {
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::c(ty.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::c(tx.frac[ox]));
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let (p00, p01, p10, p11) = (at(b, y0, x0), at(b, y0, x1), at(b, y1, x0), at(b, y1, x1));
                let o0 = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let gv = g[o0 + ch];
                    gx[p00 + ch] += gv * w00;
                    gx[p01 + ch] += gv * w01;
                    gx[p10 + ch] += gv * w10;
                    gx[p11 + ch] += gv * w11;
                }
            }
        }
    }
}

/// Non-overlapping `k×k` average pooling.
///
/// Uses a running mean so a window of identical values returns that value exactly.
pub fn avg_pool<T: Real>(x: &[T], batch: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![T::zero(); batch * oh * ow * c];
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut mean = T::zero();
                    let mut n = 0usize;
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = x[((b * h + oy * k + dy) * w + ox * k + dx) * c + ch];
                            n += 1;
                            mean = if n == 1 { v } else { mean + (v - mean) / T::c(n as f64) };
                        }
                    }
                    out[o0 + ch] = mean;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dim() {
        assert_eq!(ConvGeom::out_dim(16, 3, 2, 1), Some(8));
        assert_eq!(ConvGeom::out_dim(64, 4, 4, 0), Some(16));
        assert_eq!(ConvGeom::out_dim(2, 4, 4, 0), None);
    }

    #[test]
    fn axis_taps_identity_when_same_size() {
        let t = AxisTaps::new(5, 5);
        assert_eq!(t.lo, vec![0, 1, 2, 3, 4]);
        assert!(t.frac.iter().all(|&f| f == 0.0));
    }
}
