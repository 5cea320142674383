//! Slice-level numeric kernels shared by the forward and backward passes.

use crate::element::{gemm, lit, Element, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside the map.
    fn valid_cols(&self, kx: usize, wo: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = kx as isize - self.pad as isize;
        // ox*s + shift >= 0  and  ox*s + shift <= width-1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_num = self.width as isize - 1 - shift;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        (lo.max(0) as usize, (hi as usize).min(wo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

/// Unfold `x[C,H,W]` into `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let plane = g.height * g.width;
    let mut cols = vec![T::zero(); g.channels * k * k * ho * wo];
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = g.valid_cols(kx, wo);
                for oy in 0..ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src_row = &src[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        dst_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx[C,H,W]`.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = g.valid_cols(kx, wo);
                for oy in 0..ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    let dst_row = &mut dst[iy * g.width..(iy + 1) * g.width];
                    for ox in lo..hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst_row[ix] = dst_row[ix] + src_row[ox];
                    }
                }
            }
        }
    }
}

/// Dense convolution: `out[Co, Ho·Wo] = W[Co, C·k·k] · cols + b`.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    g: &ConvGeom,
    out_channels: usize,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let ckk = g.channels * g.kernel * g.kernel;
    let mut out = vec![T::zero(); out_channels * n];
    if let Some(b) = b {
        for (row, &bv) in out.chunks_exact_mut(n).zip(b) {
            row.fill(bv);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        gemm(MatRef::new(w, out_channels, ckk), MatRef::new(x, ckk, n), beta, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(MatRef::new(w, out_channels, ckk), MatRef::new(&cols, ckk, n), beta, &mut out);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    out_channels: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let ckk = g.channels * g.kernel * g.kernel;
    let cols_owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else if need.1 {
        cols_owned = im2col(x, g);
        &cols_owned
    } else {
        &[]
    };
    let dw = need.1.then(|| {
        let mut dw = vec![T::zero(); out_channels * ckk];
        gemm(MatRef::new(gout, out_channels, n), MatRef::new(cols, ckk, n).t(), T::zero(), &mut dw);
        dw
    });
    let db = need.2.then(|| gout.chunks_exact(n).map(|row| row.iter().copied().sum()).collect());
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); ckk * n];
        gemm(MatRef::new(w, out_channels, ckk).t(), MatRef::new(gout, out_channels, n), T::zero(), &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.channels * g.height * g.width];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    ConvGrads { dx, dw, db }
}

/// One `k×k` filter per channel.
pub(crate) fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.channels * ho * wo];
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let wv = w[(c * k + ky) * k + kx];
                let (lo, hi) = g.valid_cols(kx, wo);
                for oy in 0..ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src_row = &src[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        for (d, &s) in dst_row[lo..hi].iter_mut().zip(&src_row[start..]) {
                            *d = *d + wv * s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst_row[ox] = dst_row[ox] + wv * src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let plane = g.height * g.width;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        let gsrc = &gout[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let widx = (c * k + ky) * k + kx;
                let wv = w[widx];
                let (lo, hi) = g.valid_cols(kx, wo);
                let mut acc = T::zero();
                for oy in 0..ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let grow = &gsrc[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        let ix = ox * g.stride + kx - g.pad;
                        let gv = grow[ox];
                        if let Some(dx) = dx.as_mut() {
                            let cell = &mut dx[c * plane + iy * g.width + ix];
                            *cell = *cell + wv * gv;
                        }
                        acc = acc + gv * src[iy * g.width + ix];
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling; returns values and the flat input index of each maximum.
pub(crate) fn maxpool_forward<T: Element>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_forward<T: Element>(x: &[T], (c, h, w): (usize, usize, usize), f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            let src = &x[ch * h * w + (oy / f) * w..][..w];
            let dst = &mut out[ch * ho * wo + oy * wo..][..wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Element>(g: &[T], (c, h, w): (usize, usize, usize), f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            let src = &g[ch * ho * wo + oy * wo..][..wo];
            let dst = &mut dx[ch * h * w + (oy / f) * w..][..w];
            for (ox, &v) in src.iter().enumerate() {
                dst[ox / f] = dst[ox / f] + v;
            }
        }
    }
    dx
}

/// Group `i` of the output holds `Σ_{j≠i} x[j]` when `connected[i]`, else zeros.
pub(crate) fn cross_group_sum<T: Element>(x: &[T], groups: usize, connected: &[bool]) -> Vec<T> {
    let gsize = x.len() / groups;
    let mut total = vec![T::zero(); gsize];
    for grp in x.chunks_exact(gsize) {
        for (t, &v) in total.iter_mut().zip(grp) {
            *t = *t + v;
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for (i, (dst, grp)) in out.chunks_exact_mut(gsize).zip(x.chunks_exact(gsize)).enumerate() {
        if connected[i] {
            for ((d, &t), &v) in dst.iter_mut().zip(&total).zip(grp) {
                *d = t - v;
            }
        }
    }
    out
}

/// Adjoint of [`cross_group_sum`]: `dx[j] = Σ_{i≠j, connected[i]} g[i]`.
pub(crate) fn cross_group_sum_backward<T: Element>(g: &[T], groups: usize, connected: &[bool]) -> Vec<T> {
    let gsize = g.len() / groups;
    let mut total = vec![T::zero(); gsize];
    for (i, grp) in g.chunks_exact(gsize).enumerate() {
        if connected[i] {
            for (t, &v) in total.iter_mut().zip(grp) {
                *t = *t + v;
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for (j, (dst, grp)) in dx.chunks_exact_mut(gsize).zip(g.chunks_exact(gsize)).enumerate() {
        for ((d, &t), &v) in dst.iter_mut().zip(&total).zip(grp) {
            *d = if connected[j] { t - v } else { t };
        }
    }
    dx
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c: T = lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: T = lit(0.044_715);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c: T = lit(0.797_884_560_802_865_4);
    let a: T = lit(0.044_715);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
