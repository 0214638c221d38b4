//! Fusion quality metrics: MI, VIFF, SF, Qabf, SD and mean CIEDE2000, plus
//! per-dataset reports.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use libm::{atan, exp, log10, log2, sqrt};

use crate::color::{ciede2000, srgb_to_lab};
use crate::error::{ensure, invalid, Result};
use crate::tensor::Tensor;

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage(Tensor);

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl GrayImage {
    /// Accepts `H x W x 1` directly and collapses `H x W x 3` by luminance.
    pub fn new(tensor: &Tensor) -> Result<Self> {
        let (h, w, c) = tensor.hwc()?;
        ensure!(tensor.data().iter().all(|v| (0.0..=1.0).contains(v)), "intensities must lie in [0, 1]");
        match c {
            1 => Ok(Self(tensor.clone())),
            3 => {
                let data = tensor.data().chunks_exact(3).map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0)).collect();
                Ok(Self(Tensor::new(&[h, w, 1], data)?))
            }
            _ => Err(invalid!("expected 1 or 3 channels, got {c}")),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }
}

fn same_shape(images: &[&GrayImage]) -> Result<(usize, usize)> {
    let (h, w) = (images[0].height(), images[0].width());
    for img in &images[1..] {
        ensure!((img.height(), img.width()) == (h, w), "image shapes differ: {h}x{w} vs {}x{}", img.height(), img.width());
    }
    Ok((h, w))
}

fn bin(v: f64) -> usize {
    libm::round(v * 255.0) as usize
}

/// Mutual information in bits between two images via a 256x256 joint histogram.
fn mutual_information(x: &GrayImage, y: &GrayImage) -> f64 {
    let mut joint = vec![0u32; 256 * 256];
    let mut px = [0u32; 256];
    let mut py = [0u32; 256];
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (i, j) = (bin(a), bin(b));
        joint[i * 256 + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.data().len() as f64;
    let mut mi = 0.0;
    for (k, &count) in joint.iter().enumerate() {
        if count > 0 {
            let pxy = count as f64 / n;
            let (pa, pb) = (px[k / 256] as f64 / n, py[k % 256] as f64 / n);
            mi += pxy * log2(pxy / (pa * pb));
        }
    }
    mi
}

/// `I(A; F) + I(B; F)` with 256 bins and base-2 logarithms.
pub fn metric_mi(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    same_shape(&[a, b, f])?;
    Ok(mutual_information(a, f) + mutual_information(b, f))
}

/// Spatial frequency `sqrt(RF^2 + CF^2)` on `[0, 1]` intensities.
pub fn metric_sf(f: &GrayImage) -> Result<f64> {
    let (h, w) = (f.height(), f.width());
    ensure!(h >= 2 && w >= 2, "spatial frequency needs at least 2x2, got {h}x{w}");
    let d = f.data();
    let mut rf = 0.0;
    let mut cf = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if x > 0 {
                rf += (v - d[y * w + x - 1]) * (v - d[y * w + x - 1]);
            }
            if y > 0 {
                cf += (v - d[(y - 1) * w + x]) * (v - d[(y - 1) * w + x]);
            }
        }
    }
    rf /= (h * (w - 1)) as f64;
    cf /= ((h - 1) * w) as f64;
    Ok(sqrt(rf + cf))
}

/// Population standard deviation on the `[0, 255]` scale.
pub fn metric_sd(f: &GrayImage) -> f64 {
    let first = f.data()[0];
    if f.data().iter().all(|v| *v == first) {
        return 0.0;
    }
    let n = f.data().len() as f64;
    let mean = f.data().iter().sum::<f64>() / n;
    let var = f.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    255.0 * sqrt(var)
}

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);
const TINY: f64 = 1e-5;

struct EdgeMap {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

/// Sobel strength and orientation on the `[0, 255]` scale, with symmetric
/// boundary extension so flat regions carry no edges.
fn edge_map(img: &GrayImage) -> EdgeMap {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    let at = |y: usize, x: usize, dy: isize, dx: isize| 255.0 * d[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
    let mut strength = Vec::with_capacity(h * w);
    let mut angle = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, x, -1, 1) + 2.0 * at(y, x, 0, 1) + at(y, x, 1, 1) - at(y, x, -1, -1) - 2.0 * at(y, x, 0, -1) - at(y, x, 1, -1);
            let gy = at(y, x, 1, -1) + 2.0 * at(y, x, 1, 0) + at(y, x, 1, 1) - at(y, x, -1, -1) - 2.0 * at(y, x, -1, 0) - at(y, x, -1, 1);
            strength.push(sqrt(gx * gx + gy * gy));
            angle.push(atan(gy / if gx == 0.0 { TINY } else { gx }));
        }
    }
    EdgeMap { strength, angle }
}

fn sigmoid(v: f64, (gamma, kappa, delta): (f64, f64, f64)) -> f64 {
    gamma / (1.0 + exp(kappa * (v - delta)))
}

/// Per-pixel edge preservation of `src` in `f`, returned with the
/// (zero-guarded) source strength used as its weight.
fn edge_preservation(src: &EdgeMap, f: &EdgeMap) -> Vec<(f64, f64)> {
    src.strength
        .iter()
        .zip(&f.strength)
        .zip(src.angle.iter().zip(&f.angle))
        .map(|((&gs, &gf), (&as_, &af))| {
            let relative = if gs > gf {
                gf / gs
            } else {
                let gf = if gf == 0.0 { TINY } else { gf };
                let gs = if gs == 0.0 { TINY } else { gs };
                gs / gf
            };
            let orient = ((as_ - af).abs() - core::f64::consts::FRAC_PI_2).abs() * 2.0 / core::f64::consts::PI;
            let weight = if gs == 0.0 { TINY } else { gs };
            (sigmoid(relative, QG) * sigmoid(orient, QA), weight)
        })
        .collect()
}

/// Xydeas–Petrović edge-transfer score in `[0, 1]`.
pub fn metric_qabf(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    let (h, w) = same_shape(&[a, b, f])?;
    ensure!(h >= 3 && w >= 3, "Qabf needs at least 3x3, got {h}x{w}");
    let ef = edge_map(f);
    let qa = edge_preservation(&edge_map(a), &ef);
    let qb = edge_preservation(&edge_map(b), &ef);
    let mut num = 0.0;
    let mut den = 0.0;
    for ((q1, w1), (q2, w2)) in qa.into_iter().zip(qb) {
        num += q1 * w1 + q2 * w2;
        den += w1 + w2;
    }
    Ok(num / den)
}

/// Mean CIEDE2000 difference between two `H x W x 3` sRGB images.
pub fn metric_delta_e(visible: &Tensor, fused: &Tensor) -> Result<f64> {
    let (_, _, c) = visible.hwc()?;
    ensure!(c == 3, "visible image needs 3 channels, got {c}");
    ensure!(visible.dims() == fused.dims(), "shape mismatch {:?} vs {:?}", visible.dims(), fused.dims());
    for t in [visible, fused] {
        ensure!(t.data().iter().all(|v| (0.0..=1.0).contains(v)), "color values must lie in [0, 1]");
    }
    let total: f64 = visible
        .data()
        .chunks_exact(3)
        .zip(fused.data().chunks_exact(3))
        .map(|(p, q)| {
            if p == q {
                0.0
            } else {
                ciede2000(srgb_to_lab([p[0], p[1], p[2]]), srgb_to_lab([q[0], q[1], q[2]]))
            }
        })
        .sum();
    Ok(total / (visible.len() / 3) as f64)
}

const VIF_SCALES: usize = 4;
const VIF_NOISE_VAR: f64 = 2.0;
const VIF_WEIGHTS: [f64; VIF_SCALES] = [1.0 / 2.15, 0.0, 0.15 / 2.15, 1.0 / 2.15];
const VIF_C: f64 = 1e-7;

/// Normalized 1-D Gaussian; its outer product is the 2-D window.
fn gaussian_taps(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let r = (n as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..n).map(|i| exp(-((i as f64 - r) * (i as f64 - r)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Symmetric (edge-repeating) reflection of an out-of-range index.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Same-size separable filtering with symmetric boundary extension.
fn filter_same(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + reflect(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * rows[reflect(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    out
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(nh * nw);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(img[y * w + x]);
        }
    }
    (out, nh, nw)
}

/// Per-pixel information terms of `dist` against `reference` at one scale:
/// (information shared with the distorted image, reference information, gain).
struct VifTerms {
    shared: Vec<f64>,
    reference: Vec<f64>,
    gain: Vec<f64>,
}

fn vif_terms(reference: &[f64], dist: &[f64], h: usize, w: usize, taps: &[f64]) -> VifTerms {
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a * b).collect() };
    let mu1 = filter_same(reference, h, w, taps);
    let mu2 = filter_same(dist, h, w, taps);
    let s11 = filter_same(&prod(reference, reference), h, w, taps);
    let s22 = filter_same(&prod(dist, dist), h, w, taps);
    let s12 = filter_same(&prod(reference, dist), h, w, taps);
    let n = h * w;
    let mut terms = VifTerms { shared: Vec::with_capacity(n), reference: Vec::with_capacity(n), gain: Vec::with_capacity(n) };
    for i in 0..n {
        let mut sigma1 = (s11[i] - mu1[i] * mu1[i]).max(0.0);
        let sigma2 = (s22[i] - mu2[i] * mu2[i]).max(0.0);
        let sigma12 = s12[i] - mu1[i] * mu2[i];
        let mut g = sigma12 / (sigma1 + 1e-10);
        let mut sv = sigma2 - g * sigma12;
        if sigma1 < 1e-10 {
            g = 0.0;
            sv = sigma2;
            sigma1 = 0.0;
        }
        if sigma2 < 1e-10 {
            g = 0.0;
            sv = 0.0;
        }
        if g < 0.0 {
            sv = sigma2;
            g = 0.0;
        }
        if sv <= 1e-10 {
            sv = 1e-10;
        }
        terms.shared.push(log10(1.0 + g * g * sigma1 / (sv + VIF_NOISE_VAR)));
        terms.reference.push(log10(1.0 + sigma1 / VIF_NOISE_VAR));
        terms.gain.push(g);
    }
    terms
}

/// Fidelity ratio at one scale: where source A's gain is smaller its terms
/// are taken, otherwise B's; each summed term carries the constant `C`.
fn combine(ta: &VifTerms, tb: &VifTerms) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ta.gain.len() {
        let src = if ta.gain[i] < tb.gain[i] { ta } else { tb };
        num += src.shared[i] + VIF_C;
        den += src.reference[i] + VIF_C;
    }
    num / den
}

/// Fidelity ratio of a single scale with an `n x n` Gaussian window on the
/// given (`[0, 1]`) images, without any prefiltering.
pub fn viff_single_scale(a: &GrayImage, b: &GrayImage, f: &GrayImage, window: usize) -> Result<f64> {
    let (h, w) = same_shape(&[a, b, f])?;
    ensure!(window % 2 == 1, "window size must be odd, got {window}");
    let taps = gaussian_taps(window);
    let up = |g: &GrayImage| g.data().iter().map(|v| v * 255.0).collect::<Vec<_>>();
    let (a, b, f) = (up(a), up(b), up(f));
    Ok(combine(&vif_terms(&a, &f, h, w, &taps), &vif_terms(&b, &f, h, w, &taps)))
}

/// Four-scale fusion visual information fidelity (VIFF).
pub fn metric_vif(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    let (mut h, mut w) = same_shape(&[a, b, f])?;
    ensure!(h >= 32 && w >= 32, "VIF needs at least 32x32, got {h}x{w}");
    let up = |g: &GrayImage| g.data().iter().map(|v| v * 255.0).collect::<Vec<_>>();
    let (mut a, mut b, mut f) = (up(a), up(b), up(f));
    let mut score = 0.0;
    for scale in 0..VIF_SCALES {
        let taps = gaussian_taps((1 << (VIF_SCALES - scale)) + 1);
        if scale > 0 {
            let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
            a = downsample(&filter_same(&a, h, w, &taps), h, w).0;
            b = downsample(&filter_same(&b, h, w, &taps), h, w).0;
            f = downsample(&filter_same(&f, h, w, &taps), h, w).0;
            (h, w) = (nh, nw);
        }
        let ratio = combine(&vif_terms(&a, &f, h, w, &taps), &vif_terms(&b, &f, h, w, &taps));
        score += VIF_WEIGHTS[scale] * ratio;
    }
    Ok(score)
}

/// The six metric values of one fused image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricValues {
    pub mi: f64,
    pub vif: f64,
    pub sf: f64,
    pub qabf: f64,
    pub sd: f64,
    pub delta_e: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 6] = ["MI", "VIF", "SF", "Qabf", "SD", "DeltaE"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.mi, self.vif, self.sf, self.qabf, self.sd, self.delta_e]
    }

    /// Computes all six for `visible` (`H x W x 3`), `infrared` (`H x W x 1`)
    /// and `fused` (`H x W x 3`), all in `[0, 1]`.
    pub fn compute(visible: &Tensor, infrared: &Tensor, fused: &Tensor) -> Result<Self> {
        let a = GrayImage::new(visible)?;
        let b = GrayImage::new(infrared)?;
        let f = GrayImage::new(fused)?;
        Ok(Self {
            mi: metric_mi(&a, &b, &f)?,
            vif: metric_vif(&a, &b, &f)?,
            sf: metric_sf(&f)?,
            qabf: metric_qabf(&a, &b, &f)?,
            sd: metric_sd(&f),
            delta_e: metric_delta_e(visible, fused)?,
        })
    }
}

/// Source images of one evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub visible: Tensor,
    pub infrared: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Sorted by pair id.
    pub records: Vec<PairRecord>,
    pub mean: MetricValues,
}

impl MetricReport {
    /// Builds a report from already computed records.
    pub fn from_records(mut records: Vec<PairRecord>) -> Result<Self> {
        ensure!(!records.is_empty(), "a report needs at least one record");
        records.sort_by(|x, y| x.id.cmp(&y.id));
        for pair in records.windows(2) {
            ensure!(pair[0].id != pair[1].id, "duplicate pair id {:?}", pair[0].id);
        }
        let mut sums = [0.0; 6];
        for r in &records {
            for (s, v) in sums.iter_mut().zip(r.values.as_array()) {
                *s += v;
            }
        }
        let n = records.len() as f64;
        let [mi, vif, sf, qabf, sd, delta_e] = sums.map(|s| s / n);
        Ok(Self { records, mean: MetricValues { mi, vif, sf, qabf, sd, delta_e } })
    }

    /// Aligned, tab-delimited table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let id_width = self.records.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut out = format!("{:<id_width$}", "pair");
        for name in MetricValues::NAMES {
            let _ = write!(out, "\t{name:>12}");
        }
        out.push('\n');
        let rows = self.records.iter().map(|r| (r.id.as_str(), &r.values)).chain([("mean", &self.mean)]);
        for (id, values) in rows {
            let _ = write!(out, "{id:<id_width$}");
            for v in values.as_array() {
                let _ = write!(out, "\t{v:>12.6}");
            }
            out.push('\n');
        }
        out
    }

    /// One comma-separated record per pair (`id,MI,VIF,SF,Qabf,SD,DeltaE`,
    /// six decimals) after a header line, ending with the mean record.
    pub fn to_records(&self) -> String {
        let mut out = String::from("id");
        for name in MetricValues::NAMES {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        let rows = self.records.iter().map(|r| (r.id.as_str(), &r.values)).chain([("mean", &self.mean)]);
        for (id, values) in rows {
            out.push_str(id);
            for v in values.as_array() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Scores one fused image per pair; records come back sorted by id.
pub fn evaluate(pairs: &[EvalPair], fused: &[Tensor]) -> Result<MetricReport> {
    ensure!(pairs.len() == fused.len(), "{} pairs but {} fused images", pairs.len(), fused.len());
    let records = pairs
        .iter()
        .zip(fused)
        .map(|(p, f)| Ok(PairRecord { id: p.id.clone(), values: MetricValues::compute(&p.visible, &p.infrared, f)? }))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_records(records)
}
