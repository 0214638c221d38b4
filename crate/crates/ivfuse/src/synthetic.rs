//! Deterministic synthetic infrared/visible scenes.
//!
//! The visible image is a colored gradient with a few flat shapes, part of
//! it darkened by a shadow. The infrared image is a dim copy of the scene
//! structure plus bright thermal disks, the first of which sits inside the
//! shadow so that every pair carries infrared detail the visible image lacks.

use ivfuse_core::metrics::LUMA;
use ivfuse_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Minimum fraction of pixels where infrared exceeds visible luminance by
/// [`COMPLEMENT_MARGIN`].
pub const COMPLEMENT_FRACTION: f64 = 0.01;
pub const COMPLEMENT_MARGIN: f64 = 0.3;

const SHADOW_GAIN: f64 = 0.12;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub id: String,
    /// `H x W x 3` in `[0, 1]`.
    pub visible: Tensor,
    /// `H x W x 1` in `[0, 1]`.
    pub infrared: Tensor,
    /// `H x W x 1`, 1 on thermal pixels and 0 elsewhere.
    pub mask: Tensor,
}

pub fn pair_id(index: usize) -> String {
    format!("syn{index:04}")
}

fn luminance(rgb: &[f64]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Fraction of pixels whose infrared value exceeds the visible luminance by
/// at least [`COMPLEMENT_MARGIN`].
pub fn complementary_fraction(visible: &Tensor, infrared: &Tensor) -> f64 {
    let hits = visible
        .data()
        .chunks_exact(3)
        .zip(infrared.data())
        .filter(|(rgb, &ir)| ir - luminance(rgb) >= COMPLEMENT_MARGIN)
        .count();
    hits as f64 / infrared.len() as f64
}

struct Disk {
    cy: f64,
    cx: f64,
    r: f64,
    value: f64,
}

impl Disk {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        dy * dy + dx * dx <= self.r * self.r
    }
}

/// Generates pair `index` of the stream selected by `seed`; pairs do not
/// depend on how many others are generated.
pub fn generate_pair(index: usize, h: usize, w: usize, seed: u64) -> Result<SyntheticPair> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::InvalidArgument(format!("synthetic size {h}x{w} must be a positive multiple of 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.95));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.95));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut visible = Tensor::from_fn(&[h, w, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let (y, x) = ((p / w) as f64 / hf - 0.5, (p % w) as f64 / wf - 0.5);
        let t = ((x * ca + y * sa) + 0.5).clamp(0.0, 1.0);
        c0[c] + (c1[c] - c0[c]) * t
    });

    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
        let (sh, sw) = (rng.random_range(side / 8.0..side / 3.0), rng.random_range(side / 8.0..side / 3.0));
        let (y0, x0) = (rng.random_range(0.0..hf - sh), rng.random_range(0.0..wf - sw));
        let round = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = if round {
                    let (dy, dx) = ((py - y0 - sh / 2.0) / (sh / 2.0), (px - x0 - sw / 2.0) / (sw / 2.0));
                    dy * dy + dx * dx <= 1.0
                } else {
                    py >= y0 && py < y0 + sh && px >= x0 && px < x0 + sw
                };
                if inside {
                    visible.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }

    // Dim infrared structure from the unshadowed scene.
    let mut infrared = Tensor::from_fn(&[h, w, 1], |p| 0.06 + 0.2 * luminance(&visible.data()[p * 3..p * 3 + 3]));

    let (shh, shw) = (rng.random_range(hf / 2.0..0.75 * hf), rng.random_range(wf / 2.0..0.75 * wf));
    let (sy0, sx0) = (rng.random_range(0.0..hf - shh), rng.random_range(0.0..wf - shw));
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if py >= sy0 && py < sy0 + shh && px >= sx0 && px < sx0 + shw {
                for v in &mut visible.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3] {
                    *v *= SHADOW_GAIN;
                }
            }
        }
    }

    let mut disks = Vec::new();
    let r = rng.random_range(side / 8.0..side / 5.0);
    disks.push(Disk {
        cy: rng.random_range(sy0 + r / 2.0..sy0 + shh - r / 2.0),
        cx: rng.random_range(sx0 + r / 2.0..sx0 + shw - r / 2.0),
        r,
        value: rng.random_range(0.85..1.0),
    });
    if rng.random_bool(0.5) {
        let r = rng.random_range(side / 10.0..side / 6.0);
        disks.push(Disk { cy: rng.random_range(r..hf - r), cx: rng.random_range(r..wf - r), r, value: rng.random_range(0.8..1.0) });
    }
    let mut mask = Tensor::zeros(&[h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = disks.iter().find(|d| d.contains(y, x)) {
                infrared.data_mut()[y * w + x] = d.value;
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
    }

    // The first disk's central square lies inside the shadow, which covers
    // at least r^2 >= side^2 / 64 pixels; extreme aspect ratios could still
    // fall short, so widen the disk until the guarantee holds.
    while complementary_fraction(&visible, &infrared) < COMPLEMENT_FRACTION {
        let d = &mut disks[0];
        d.r += 1.0;
        for y in 0..h {
            for x in 0..w {
                if d.contains(y, x) {
                    infrared.data_mut()[y * w + x] = d.value;
                    mask.data_mut()[y * w + x] = 1.0;
                }
            }
        }
        if d.r > hf + wf {
            return Err(Error::State("synthetic scene cannot reach the complementarity target".into()));
        }
    }

    Ok(SyntheticPair { id: pair_id(index), visible, infrared, mask })
}
