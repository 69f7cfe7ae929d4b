//! Independent reference implementations used as test oracles. Everything
//! here is written as plain scalar loops straight from the definitions and
//! shares no code with the library.

#![allow(dead_code)]

use adafuse_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn binary(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// Six nested loops over output position, output channel and kernel window.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

pub fn pool_ref(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (p, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::new();
    for pi in 0..p {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(pi * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(&[s[0], s[1], h / 2, w / 2], out).unwrap()
}

/// Scalar bilinear interpolation under the half-pixel-centre convention.
pub fn bilinear_ref(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let sample = |plane: &[f64], sy: f64, sx: f64| {
        let sy = sy.max(0.0).min((h - 1) as f64);
        let sx = sx.max(0.0).min((w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let at = |y: usize, x: usize| plane[y * w + x];
        at(y0, x0) * (1.0 - fy) * (1.0 - fx) + at(y0, x1) * (1.0 - fy) * fx + at(y1, x0) * fy * (1.0 - fx) + at(y1, x1) * fy * fx
    };
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                out.push(sample(plane, sy, sx));
            }
        }
    }
    Tensor::new(&[s[0], s[1], oh, ow], out).unwrap()
}

const EPS: f64 = 1e-7;

/// `−Σ [t ln p + (1 − t) ln(1 − p)]` with `p` clamped to `[ε, 1 − ε]`.
pub fn ce_ref(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        let p = p.clamp(EPS, 1.0 - EPS);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    acc
}

/// `(1/N) Σ_n Σ (∂x S − ∂x Y)² + (∂y S − ∂y Y)²` for `[N,1,H,W]` maps.
pub fn edge_ref(s: &Tensor, y: &Tensor) -> f64 {
    let sh = s.shape();
    let (n, h, w) = (sh[0], sh[2], sh[3]);
    let at = |t: &Tensor, i: usize, r: usize, c: usize| t.data()[(i * h + r) * w + c];
    let mut total = 0.0;
    for i in 0..n {
        for r in 0..h {
            for c in 0..w - 1 {
                let d = (at(s, i, r, c + 1) - at(s, i, r, c)) - (at(y, i, r, c + 1) - at(y, i, r, c));
                total += d * d;
            }
        }
        for r in 0..h - 1 {
            for c in 0..w {
                let d = (at(s, i, r + 1, c) - at(s, i, r, c)) - (at(y, i, r + 1, c) - at(y, i, r, c));
                total += d * d;
            }
        }
    }
    total / n as f64
}

pub fn pseudo_target_ref(s_rgb: &[f64], y: &[f64]) -> Vec<f64> {
    s_rgb.iter().zip(y).map(|(&s, &y)| if y == 1.0 { s } else { 1.0 - s }).collect()
}

/// Per-threshold `(tp, fp, fn)` by counting every pixel against every threshold.
pub fn counts_ref(s: &[f64], y: &[f64]) -> Vec<(usize, usize, usize)> {
    (0..255)
        .map(|k| {
            let t = k as f64 / 255.0;
            let mut c = (0, 0, 0);
            for (&v, &g) in s.iter().zip(y) {
                let pred = v >= t;
                let pos = g == 1.0;
                if pred && pos {
                    c.0 += 1;
                } else if pred {
                    c.1 += 1;
                } else if pos {
                    c.2 += 1;
                }
            }
            c
        })
        .collect()
}

pub fn pr_ref(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

pub fn f_ref(p: f64, r: f64) -> f64 {
    if p == 0.0 && r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

pub fn adaptive_f_ref(s: &[f64], y: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let t = mean + std;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&v, &g) in s.iter().zip(y) {
        match (v >= t, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let (p, r) = pr_ref(tp, fp, fn_);
    (t, f_ref(p, r))
}

pub fn mae_ref(s: &[f64], y: &[f64]) -> f64 {
    s.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64
}

/// Central finite difference of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad).unwrap()
}

/// Asserts element-wise agreement: relative error below `rel`, or absolute
/// error below `abs` near zero.
pub fn assert_close(analytic: &Tensor, numeric: &Tensor, rel: f64, abs: f64, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(
            diff < abs || diff / scale < rel,
            "{what}[{i}]: analytic {a} vs numeric {n} (rel {})",
            diff / scale
        );
    }
}
