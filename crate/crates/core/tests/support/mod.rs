//! Straight-line metric oracles shared by the core tests and the acceptance
//! suite. Each recomputes a metric pixel by pixel from its defining formulas
//! without the library's helpers.

#![allow(dead_code)]

use std::collections::HashMap;

use ivfuse_core::metrics::GrayImage;
use ivfuse_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gray_from(h: usize, w: usize, data: Vec<f64>) -> GrayImage {
    GrayImage::new(&Tensor::new(&[h, w, 1], data).unwrap()).unwrap()
}

pub fn random_gray(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    gray_from(h, w, (0..h * w).map(|_| r.random::<f64>()).collect())
}

/// Random image using only `n` evenly spaced gray levels.
pub fn levels(h: usize, w: usize, n: u32, seed: u64) -> GrayImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    gray_from(h, w, (0..h * w).map(|_| f64::from(r.random_range(0..n)) / f64::from(n - 1)).collect())
}

fn bytes(g: &GrayImage) -> Vec<u8> {
    g.data().iter().map(|v| (v * 255.0).round() as u8).collect()
}

/// `H(X) + H(Y) - H(X, Y)` in bits.
fn mutual_information(x: &[u8], y: &[u8]) -> f64 {
    let n = x.len() as f64;
    let mut joint: HashMap<(u8, u8), f64> = HashMap::new();
    let mut px: HashMap<u8, f64> = HashMap::new();
    let mut py: HashMap<u8, f64> = HashMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1.0 / n;
        *px.entry(a).or_default() += 1.0 / n;
        *py.entry(b).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<u8, f64>| -m.values().map(|p| p * p.log2()).sum::<f64>();
    let hxy = -joint.values().map(|p| p * p.log2()).sum::<f64>();
    h(&px) + h(&py) - hxy
}

pub fn mi_oracle(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    mutual_information(&bytes(a), &bytes(f)) + mutual_information(&bytes(b), &bytes(f))
}

pub fn sf_oracle(f: &GrayImage) -> f64 {
    let (h, w) = (f.height(), f.width());
    let v = |y: usize, x: usize| f.data()[y * w + x];
    let (mut rf, mut cf) = (0.0, 0.0);
    for y in 0..h {
        for x in 1..w {
            rf += (v(y, x) - v(y, x - 1)).powi(2);
        }
    }
    for y in 1..h {
        for x in 0..w {
            cf += (v(y, x) - v(y - 1, x)).powi(2);
        }
    }
    (rf / (h * (w - 1)) as f64 + cf / ((h - 1) * w) as f64).sqrt()
}

pub fn sd_oracle(f: &GrayImage) -> f64 {
    let vals: Vec<f64> = f.data().iter().map(|v| v * 255.0).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn fold(i: isize, len: usize) -> usize {
    let p = 2 * len as isize;
    let m = i.rem_euclid(p);
    if m < len as isize {
        m as usize
    } else {
        (p - 1 - m) as usize
    }
}

/// Qabf per pixel with the published sigmoid constants.
pub fn qabf_oracle(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    let (h, w) = (a.height(), a.width());
    let px = |g: &GrayImage, y: isize, x: isize| 255.0 * g.data()[fold(y, h) * w + fold(x, w)];
    let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let grad = |g: &GrayImage, y: usize, x: usize| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let v = px(g, y as isize + i as isize - 1, x as isize + j as isize - 1);
                gx += sx[i][j] * v;
                gy += sx[j][i] * v;
            }
        }
        let strength = (gx * gx + gy * gy).sqrt();
        let gx = if gx == 0.0 { 1e-5 } else { gx };
        (strength, (gy / gx).atan())
    };
    let q = |gs: f64, as_: f64, gf: f64, af: f64| {
        let g = if gs > gf {
            gf / gs
        } else {
            let gs = if gs == 0.0 { 1e-5 } else { gs };
            let gf = if gf == 0.0 { 1e-5 } else { gf };
            gs / gf
        };
        let alpha = ((as_ - af).abs() - std::f64::consts::FRAC_PI_2).abs() / std::f64::consts::FRAC_PI_2;
        let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
        let qa = 0.9879 / (1.0 + (-22.0 * (alpha - 0.8)).exp());
        qg * qa
    };
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (ga, aa) = grad(a, y, x);
            let (gb, ab) = grad(b, y, x);
            let (gf, af) = grad(f, y, x);
            let wa = if ga == 0.0 { 1e-5 } else { ga };
            let wb = if gb == 0.0 { 1e-5 } else { gb };
            num += q(ga, aa, gf, af) * wa + q(gb, ab, gf, af) * wb;
            den += wa + wb;
        }
    }
    num / den
}

fn gaussian_2d(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            win[i * n + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.into_iter().map(|v| v / total).collect()
}

/// Information terms at one pixel as (shared, reference, gain).
fn vif_pixel(r: &[f64], d: &[f64], h: usize, w: usize, win: &[f64], n: usize, y: usize, x: usize) -> (f64, f64, f64) {
    let (mut m1, mut m2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let k = win[i * n + j];
            let yy = fold(y as isize + i as isize - (n / 2) as isize, h);
            let xx = fold(x as isize + j as isize - (n / 2) as isize, w);
            let (a, b) = (r[yy * w + xx], d[yy * w + xx]);
            m1 += k * a;
            m2 += k * b;
            s11 += k * a * a;
            s22 += k * b * b;
            s12 += k * a * b;
        }
    }
    let mut v1 = (s11 - m1 * m1).max(0.0);
    let v2 = (s22 - m2 * m2).max(0.0);
    let c12 = s12 - m1 * m2;
    let mut g = c12 / (v1 + 1e-10);
    let mut sv = v2 - g * c12;
    if v1 < 1e-10 {
        g = 0.0;
        sv = v2;
        v1 = 0.0;
    }
    if v2 < 1e-10 {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = v2;
        g = 0.0;
    }
    let sv = sv.max(1e-10);
    ((1.0 + g * g * v1 / (sv + 2.0)).log10(), (1.0 + v1 / 2.0).log10(), g)
}

fn vif_ratio(a: &[f64], b: &[f64], f: &[f64], h: usize, w: usize, n: usize) -> f64 {
    let win = gaussian_2d(n);
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let ta = vif_pixel(a, f, h, w, &win, n, y, x);
            let tb = vif_pixel(b, f, h, w, &win, n, y, x);
            let pick = if ta.2 < tb.2 { ta } else { tb };
            num += pick.0 + 1e-7;
            den += pick.1 + 1e-7;
        }
    }
    num / den
}

fn scaled(g: &GrayImage) -> Vec<f64> {
    g.data().iter().map(|v| v * 255.0).collect()
}

/// One scale with an `n x n` window and no prefiltering.
pub fn vif_single_scale_oracle(a: &GrayImage, b: &GrayImage, f: &GrayImage, n: usize) -> f64 {
    vif_ratio(&scaled(a), &scaled(b), &scaled(f), a.height(), a.width(), n)
}

fn blur_down(img: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let win = gaussian_2d(n);
    let mut out = Vec::new();
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let yy = fold(y as isize + i as isize - (n / 2) as isize, h);
                    let xx = fold(x as isize + j as isize - (n / 2) as isize, w);
                    acc += win[i * n + j] * img[yy * w + xx];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Four-scale VIFF with weights `[1, 0, 0.15, 1] / 2.15`.
pub fn vif_oracle(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    let weights = [1.0 / 2.15, 0.0, 0.15 / 2.15, 1.0 / 2.15];
    let (mut sa, mut sb, mut sf) = (scaled(a), scaled(b), scaled(f));
    let (mut h, mut w) = (a.height(), a.width());
    let mut total = 0.0;
    for (s, weight) in weights.iter().enumerate() {
        let n = (1 << (4 - s)) + 1;
        if s > 0 {
            sa = blur_down(&sa, h, w, n);
            sb = blur_down(&sb, h, w, n);
            sf = blur_down(&sf, h, w, n);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        total += weight * vif_ratio(&sa, &sb, &sf, h, w, n);
    }
    total
}

/// Published CIEDE2000 verification pairs (L1, a1, b1, L2, a2, b2, dE00).
pub const CIEDE2000_PAIRS: [[f64; 7]; 34] = [
    [50.0, 2.6772, -79.7751, 50.0, 0.0, -82.7485, 2.0425],
    [50.0, 3.1571, -77.2803, 50.0, 0.0, -82.7485, 2.8615],
    [50.0, 2.8361, -74.0200, 50.0, 0.0, -82.7485, 3.4412],
    [50.0, -1.3802, -84.2814, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, -1.1848, -84.8006, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, -0.9009, -85.5211, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, 0.0, 0.0, 50.0, -1.0, 2.0, 2.3669],
    [50.0, -1.0, 2.0, 50.0, 0.0, 0.0, 2.3669],
    [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0009, 7.1792],
    [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0010, 7.1792],
    [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0011, 7.2195],
    [50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0012, 7.2195],
    [50.0, -0.0010, 2.4900, 50.0, 0.0009, -2.4900, 4.8045],
    [50.0, -0.0010, 2.4900, 50.0, 0.0010, -2.4900, 4.8045],
    [50.0, -0.0010, 2.4900, 50.0, 0.0011, -2.4900, 4.7461],
    [50.0, 2.5000, 0.0000, 50.0, 0.0000, -2.5000, 4.3065],
    [50.0, 2.5000, 0.0000, 73.0, 25.0, -18.0, 27.1492],
    [50.0, 2.5000, 0.0000, 61.0, -5.0, 29.0, 22.8977],
    [50.0, 2.5000, 0.0000, 56.0, -27.0, -3.0, 31.9030],
    [50.0, 2.5000, 0.0000, 58.0, 24.0, 15.0, 19.4535],
    [50.0, 2.5000, 0.0000, 50.0, 3.1736, 0.5854, 1.0000],
    [50.0, 2.5000, 0.0000, 50.0, 3.2972, 0.0000, 1.0000],
    [50.0, 2.5000, 0.0000, 50.0, 1.8634, 0.5757, 1.0000],
    [50.0, 2.5000, 0.0000, 50.0, 3.2592, 0.3350, 1.0000],
    [60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644],
    [63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630],
    [61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731],
    [35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645],
    [22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373],
    [36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146],
    [90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441],
    [90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381],
    [6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377],
    [2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082],
];
