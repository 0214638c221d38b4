//! sRGB / CIELAB conversion (D65) and the CIEDE2000 color difference.

use libm::{atan2, cos, exp, pow, sin, sqrt};

/// A CIELAB color under the D65 reference white.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

fn invert(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r: usize, c: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
        m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
    };
    let det = m[0][0] * cof(0, 0) + m[0][1] * cof(0, 1) + m[0][2] * cof(0, 2);
    core::array::from_fn(|r| core::array::from_fn(|c| cof(c, r) / det))
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        pow((v + 0.055) / 1.055, 2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * pow(v, 1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        libm::cbrt(t)
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let cube = f * f * f;
    if cube > EPSILON {
        cube
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts an sRGB triple in `[0, 1]` to CIELAB.
pub fn srgb_to_lab(rgb: [f64; 3]) -> Lab {
    let xyz = mat_vec(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let w = white();
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / w[i]));
    Lab { l: 116.0 * fy - 16.0, a: 500.0 * (fx - fy), b: 200.0 * (fy - fz) }
}

/// Converts CIELAB back to (unclamped) sRGB.
pub fn lab_to_srgb(lab: Lab) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let y = if lab.l > KAPPA * EPSILON { fy * fy * fy } else { lab.l / KAPPA };
    let w = white();
    let xyz = [lab_f_inv(fx) * w[0], y * w[1], lab_f_inv(fz) * w[2]];
    mat_vec(&invert(&RGB_TO_XYZ), xyz).map(linear_to_srgb)
}

fn hue_degrees(b: f64, a: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let h = atan2(b, a).to_degrees();
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

fn cos_deg(d: f64) -> f64 {
    cos(d.to_radians())
}

/// CIEDE2000 difference with `k_L = k_C = k_H = 1`.
pub fn ciede2000(x: Lab, y: Lab) -> f64 {
    const POW25_7: f64 = 6_103_515_625.0;
    let c1 = sqrt(x.a * x.a + x.b * x.b);
    let c2 = sqrt(y.a * y.a + y.b * y.b);
    let c_mean7 = pow((c1 + c2) / 2.0, 7.0);
    let g = 0.5 * (1.0 - sqrt(c_mean7 / (c_mean7 + POW25_7)));
    let a1 = (1.0 + g) * x.a;
    let a2 = (1.0 + g) * y.a;
    let c1p = sqrt(a1 * a1 + x.b * x.b);
    let c2p = sqrt(a2 * a2 + y.b * y.b);
    let h1 = hue_degrees(x.b, a1);
    let h2 = hue_degrees(y.b, a2);
    let chroma_product = c1p * c2p;

    let dl = y.l - x.l;
    let dc = c2p - c1p;
    let dh = if chroma_product == 0.0 {
        0.0
    } else {
        let d = h2 - h1;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh_big = 2.0 * sqrt(chroma_product) * sin((dh / 2.0).to_radians());

    let l_mean = (x.l + y.l) / 2.0;
    let c_mean = (c1p + c2p) / 2.0;
    let h_mean = if chroma_product == 0.0 {
        h1 + h2
    } else if (h1 - h2).abs() <= 180.0 {
        (h1 + h2) / 2.0
    } else if h1 + h2 < 360.0 {
        (h1 + h2 + 360.0) / 2.0
    } else {
        (h1 + h2 - 360.0) / 2.0
    };

    let t = 1.0 - 0.17 * cos_deg(h_mean - 30.0) + 0.24 * cos_deg(2.0 * h_mean) + 0.32 * cos_deg(3.0 * h_mean + 6.0)
        - 0.20 * cos_deg(4.0 * h_mean - 63.0);
    let dtheta = 30.0 * exp(-((h_mean - 275.0) / 25.0) * ((h_mean - 275.0) / 25.0));
    let c_mean7 = pow(c_mean, 7.0);
    let rc = 2.0 * sqrt(c_mean7 / (c_mean7 + POW25_7));
    let l50 = (l_mean - 50.0) * (l_mean - 50.0);
    let sl = 1.0 + 0.015 * l50 / sqrt(20.0 + l50);
    let sc = 1.0 + 0.045 * c_mean;
    let sh = 1.0 + 0.015 * c_mean * t;
    let rt = -sin((2.0 * dtheta).to_radians()) * rc;

    let (tl, tc, th) = (dl / sl, dc / sc, dh_big / sh);
    sqrt((tl * tl + tc * tc + th * th + rt * tc * th).max(0.0))
}
