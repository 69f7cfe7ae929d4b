//! Raw numeric kernels over flat NCHW buffers.
//!
//! These carry no autodiff bookkeeping; [`crate::graph`] wraps them as
//! recorded operations. The heavy ones take an [`Exec`] and split work per
//! sample or per channel plane.

use std::cell::RefCell;

use crate::par::Exec;
use crate::tensor::{Result, TensorError};

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with a per-thread scratch buffer of at least `len` elements.
/// Contents are unspecified on entry.
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut buf = cell.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let out = f(&mut buf[..len]);
        cell.replace(buf);
        out
    })
}

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is inside the slices given the strides and
    // extents checked by the callers (operands are dense row-major blocks).
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

/// Geometry of a 2-D convolution with square stride and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, kcin, kh, kw] = kernel;
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin, kh, kw],
                got: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {pad})"),
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose source column `ox·stride + kj − pad` is inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(s) };
        // largest ox with ox·s + kj − pad ≤ w − 1
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one sample into a `[cin·kh·kw, oh·ow]` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.out_plane();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let dst = &mut cols[row..row + p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let ix0 = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (k, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds a patch-matrix gradient back onto one sample (accumulating).
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.out_plane();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let src = &cols[row..row + p];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * self.stride + kj - self.pad;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            dst[ix0..ix0 + line.len()].iter_mut().zip(line).for_each(|(d, g)| *d += g);
                        } else {
                            for (k, &g) in line.iter().enumerate() {
                                dst[ix0 + k * self.stride] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    /// 3×3, stride 1, padding 1: handled by the direct kernels below.
    fn is_same3x3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1
    }
}

/// Copies `planes` planes of `h×w` into a zero-bordered `(h+2)×(w+2)` layout.
fn pad_planes(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let pw = w + 2;
    let plane_len = (h + 2) * pw;
    for (src, dst) in x.chunks(h * w).take(planes).zip(out.chunks_mut(plane_len)) {
        dst[..pw].fill(0.0);
        dst[(h + 1) * pw..].fill(0.0);
        for y in 0..h {
            let row = &mut dst[(y + 1) * pw..(y + 2) * pw];
            row[0] = 0.0;
            row[pw - 1] = 0.0;
            row[1..=w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
}

/// `out += k ⋆ src` for one padded source plane and one 3×3 kernel.
fn correlate3x3_acc(src: &[f64], k: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let pw = w + 2;
    let k: [f64; 9] = k.try_into().expect("3x3 kernel");
    for y in 0..h {
        let o = &mut out[y * w..(y + 1) * w];
        let r0 = &src[y * pw..y * pw + pw];
        let r1 = &src[(y + 1) * pw..(y + 1) * pw + pw];
        let r2 = &src[(y + 2) * pw..(y + 2) * pw + pw];
        let (a0, a1, a2) = (&r0[..w], &r0[1..w + 1], &r0[2..w + 2]);
        let (b0, b1, b2) = (&r1[..w], &r1[1..w + 1], &r1[2..w + 2]);
        let (c0, c1, c2) = (&r2[..w], &r2[1..w + 1], &r2[2..w + 2]);
        for x in 0..w {
            o[x] += k[0] * a0[x]
                + k[1] * a1[x]
                + k[2] * a2[x]
                + k[3] * b0[x]
                + k[4] * b1[x]
                + k[5] * b2[x]
                + k[6] * c0[x]
                + k[7] * c1[x]
                + k[8] * c2[x];
        }
    }
}

/// The nine sums `Σ_{y,x} d[y][x] · src[y+ki][x+kj]` over a padded source plane.
fn tap_sums3x3(d: &[f64], src: &[f64], h: usize, w: usize) -> [f64; 9] {
    const L: usize = 4;
    let pw = w + 2;
    let mut acc = [[0.0f64; L]; 9];
    let body = w - w % L;
    for y in 0..h {
        let drow = &d[y * w..(y + 1) * w];
        for ki in 0..3 {
            let r = &src[(y + ki) * pw..(y + ki + 1) * pw];
            for kj in 0..3 {
                let s = &r[kj..kj + w];
                let a = &mut acc[ki * 3 + kj];
                for (dc, sc) in drow[..body].chunks_exact(L).zip(s[..body].chunks_exact(L)) {
                    for l in 0..L {
                        a[l] += dc[l] * sc[l];
                    }
                }
                for x in body..w {
                    a[0] += drow[x] * s[x];
                }
            }
        }
    }
    acc.map(|a| (a[0] + a[1]) + (a[2] + a[3]))
}

fn conv3x3_forward_sample(g: &ConvGeom, x_n: &[f64], weight: &[f64], out_n: &mut [f64], padded: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let plane = (h + 2) * (w + 2);
    pad_planes(x_n, g.cin, h, w, padded);
    for (co, o) in out_n.chunks_mut(h * w).enumerate() {
        for ci in 0..g.cin {
            let k = &weight[(co * g.cin + ci) * 9..(co * g.cin + ci + 1) * 9];
            correlate3x3_acc(&padded[ci * plane..(ci + 1) * plane], k, h, w, o);
        }
    }
}

/// Weight gradient and (optionally) input gradient of one sample.
fn conv3x3_backward_sample(
    g: &ConvGeom,
    x_n: &[f64],
    weight: &[f64],
    d_n: &[f64],
    dw: &mut [f64],
    dx_n: Option<&mut [f64]>,
    scratch: &mut [f64],
) {
    let (h, w) = (g.h, g.w);
    let plane = (h + 2) * (w + 2);
    let (xpad, dpad) = scratch.split_at_mut(g.cin * plane);
    pad_planes(x_n, g.cin, h, w, xpad);
    for co in 0..g.cout {
        let d = &d_n[co * h * w..(co + 1) * h * w];
        for ci in 0..g.cin {
            let taps = tap_sums3x3(d, &xpad[ci * plane..(ci + 1) * plane], h, w);
            dw[(co * g.cin + ci) * 9..(co * g.cin + ci + 1) * 9].copy_from_slice(&taps);
        }
    }
    if let Some(dx_n) = dx_n {
        // dx = full correlation of dout with the 180°-rotated kernels.
        pad_planes(d_n, g.cout, h, w, dpad);
        let mut rot = [0.0; 9];
        for (ci, dxp) in dx_n.chunks_mut(h * w).enumerate() {
            for co in 0..g.cout {
                let k = &weight[(co * g.cin + ci) * 9..(co * g.cin + ci + 1) * 9];
                for (t, r) in rot.iter_mut().enumerate() {
                    *r = k[8 - t];
                }
                correlate3x3_acc(&dpad[co * plane..(co + 1) * plane], &rot, h, w, dxp);
            }
        }
    }
}

pub fn conv2d_forward(exec: Exec, g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.out_plane();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * p];
    exec.for_each_chunk(&mut out, g.cout * p, |n, out_n| {
        for (co, plane) in out_n.chunks_mut(p).enumerate() {
            plane.fill(bias[co]);
        }
        let x_n = &x[n * in_len..(n + 1) * in_len];
        if g.is_same3x3() {
            with_scratch(g.cin * (g.h + 2) * (g.w + 2), |pad| {
                conv3x3_forward_sample(g, x_n, weight, out_n, pad)
            });
        } else if g.is_pointwise() {
            gemm(g.cout, k, p, weight, (k as isize, 1), x_n, (p as isize, 1), 1.0, out_n);
        } else {
            with_scratch(k * p, |cols| {
                g.im2col(x_n, cols);
                gemm(g.cout, k, p, weight, (k as isize, 1), cols, (p as isize, 1), 1.0, out_n);
            });
        }
    });
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    exec: Exec,
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_input: bool,
) -> ConvGrads {
    let p = g.out_plane();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;

    // Per-sample weight/bias gradients, summed afterwards in sample order.
    let per_sample = |n: usize, dx_n: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        let d_n = &dout[n * g.cout * p..(n + 1) * g.cout * p];
        let mut dw = vec![0.0; g.cout * k];
        let db = d_n.chunks(p).map(|c| c.iter().sum()).collect();
        let backprop = |cols: &[f64], dcols: &mut [f64], dx_n: Option<&mut [f64]>, dw: &mut [f64]| {
            gemm(g.cout, p, k, d_n, (p as isize, 1), cols, (1, p as isize), 0.0, dw);
            if let Some(dx_n) = dx_n {
                if g.is_pointwise() {
                    gemm(k, g.cout, p, weight, (1, k as isize), d_n, (p as isize, 1), 0.0, dx_n);
                } else {
                    gemm(k, g.cout, p, weight, (1, k as isize), d_n, (p as isize, 1), 0.0, dcols);
                    g.col2im(dcols, dx_n);
                }
            }
        };
        if g.is_same3x3() {
            let plane = (g.h + 2) * (g.w + 2);
            with_scratch((g.cin + g.cout) * plane, |buf| {
                conv3x3_backward_sample(g, x_n, weight, d_n, &mut dw, dx_n, buf)
            });
        } else if g.is_pointwise() {
            backprop(x_n, &mut [], dx_n, &mut dw);
        } else {
            with_scratch(2 * k * p, |buf| {
                let (cols, dcols) = buf.split_at_mut(k * p);
                g.im2col(x_n, cols);
                backprop(cols, dcols, dx_n, &mut dw);
            });
        }
        (dw, db)
    };

    let (input, parts) = if need_input {
        let mut dx = vec![0.0; g.n * in_len];
        let parts = exec.map_chunks(&mut dx, in_len, |n, dx_n| per_sample(n, Some(dx_n)));
        (Some(dx), parts)
    } else {
        (None, exec.map_range(g.n, |n| per_sample(n, None)))
    };

    let mut dweight = vec![0.0; g.cout * k];
    let mut dbias = vec![0.0; g.cout];
    for (dw, db) in parts {
        dweight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        dbias.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    }
    ConvGrads {
        input,
        weight: dweight,
        bias: dbias,
    }
}

/// 2×2 / stride-2 max pooling over `planes` planes of `h×w`.
/// Returns the pooled values and, per output cell, the flat input index of
/// the first maximum in its window.
pub fn max_pool2_forward(exec: Exec, planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let argmax = exec.map_chunks(&mut out, oh * ow, |pi, o| {
        let base = pi * h * w;
        let mut idx = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                o[oy * ow + ox] = x[best];
                idx.push(best);
            }
        }
        idx
    });
    (out, argmax.into_iter().flatten().collect())
}

pub fn max_pool2_backward(in_len: usize, argmax: &[usize], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i] += g;
    }
    dx
}

/// Source taps for one output coordinate along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

/// Half-pixel-centre sampling: `src = (dst + 0.5) · in/out − 0.5`, clamped to `[0, in−1]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    let max = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resampling of `planes` planes from `h×w` to `oh×ow`.
pub fn bilinear_forward(exec: Exec, planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize), x: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    exec.for_each_chunk(&mut out, oh * ow, |pi, o| {
        let src = &x[pi * h * w..(pi + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                o[oy * ow + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    });
    out
}

/// Transpose of [`bilinear_forward`]: scatters output cotangents onto the source grid.
pub fn bilinear_backward(exec: Exec, planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize), dout: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    exec.for_each_chunk(&mut dx, h * w, |pi, d| {
        let g = &dout[pi * oh * ow..(pi + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[a.lo * w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
                d[a.lo * w + b.hi] += v * (1.0 - a.frac) * b.frac;
                d[a.hi * w + b.lo] += v * a.frac * (1.0 - b.frac);
                d[a.hi * w + b.hi] += v * a.frac * b.frac;
            }
        }
    });
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Horizontal: differences between neighbouring columns.
    X,
    /// Vertical: differences between neighbouring rows.
    Y,
}

pub fn diff_forward(planes: usize, h: usize, w: usize, axis: Axis, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * h * w);
    for plane in x.chunks(h * w) {
        match axis {
            Axis::X => {
                for row in plane.chunks(w) {
                    out.extend(row.windows(2).map(|p| p[1] - p[0]));
                }
            }
            Axis::Y => {
                for i in 0..(h - 1) * w {
                    out.push(plane[i + w] - plane[i]);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), planes * diff_len(h, w, axis));
    out
}

pub fn diff_backward(planes: usize, h: usize, w: usize, axis: Axis, dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    let dlen = diff_len(h, w, axis);
    for (plane, g) in dx.chunks_mut(h * w).zip(dout.chunks(dlen)) {
        match axis {
            Axis::X => {
                for (r, row) in g.chunks(w - 1).enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        plane[r * w + j + 1] += v;
                        plane[r * w + j] -= v;
                    }
                }
            }
            Axis::Y => {
                for (i, &v) in g.iter().enumerate() {
                    plane[i + w] += v;
                    plane[i] -= v;
                }
            }
        }
    }
    dx
}

fn diff_len(h: usize, w: usize, axis: Axis) -> usize {
    match axis {
        Axis::X => h * (w - 1),
        Axis::Y => (h - 1) * w,
    }
}
