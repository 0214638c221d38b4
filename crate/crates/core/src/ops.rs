//! Convolution and resampling kernels on HWC tensors, with the adjoints used
//! by the gradient tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// `c = a * b + beta * c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (h, w, cin) = input.hwc()?;
        ensure!(kernel.dims().len() == 4, "kernel must be [kh, kw, cin, cout], got {:?}", kernel.dims());
        let (kh, kw, kc, cout) = (kernel.dims()[0], kernel.dims()[1], kernel.dims()[2], kernel.dims()[3]);
        ensure!(kc == cin, "kernel expects {} input channels, input has {}", kc, cin);
        ensure!(stride >= 1, "stride must be at least 1");
        ensure!(
            h + 2 * padding >= kh && w + 2 * padding >= kw,
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * padding,
            w + 2 * padding
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(Self { h, w, cin, kh, kw, cout, stride, padding, oh, ow })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input pixel under kernel tap `(ky, kx)` for output `(oy, ox)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }

    /// Patch matrix of shape `[oh*ow, kh*kw*cin]`, taps ordered `(ky, kx, c)`.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let k = self.patch_len();
        let mut cols = vec![0.0; self.oh * self.ow * k];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(px) = self.source(oy, ox, ky, kx) {
                            let dst = (ky * self.kw + kx) * self.cin;
                            row[dst..dst + self.cin]
                                .copy_from_slice(&input[px * self.cin..(px + 1) * self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let k = self.patch_len();
        let mut out = vec![0.0; self.h * self.w * self.cin];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(px) = self.source(oy, ox, ky, kx) {
                            let src = (ky * self.kw + kx) * self.cin;
                            let dst = &mut out[px * self.cin..(px + 1) * self.cin];
                            for (d, s) in dst.iter_mut().zip(&row[src..src + self.cin]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Discrete 2-D cross-correlation of an HWC input with a `[kh, kw, cin, cout]`
/// kernel, zero padded by `padding` on every side.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    Ok(conv2d_forward(&g, input, kernel))
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &Tensor, kernel: &Tensor) -> Tensor {
    let p = g.oh * g.ow;
    let k = g.patch_len();
    let mut out = vec![0.0; p * g.cout];
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    gemm(p, k, g.cout, cols, (k, 1), kernel.data(), (g.cout, 1), 0.0, &mut out, (g.cout, 1));
    Tensor::from_parts(vec![g.oh, g.ow, g.cout], out)
}

/// Gradient with respect to the kernel given the upstream output gradient.
pub(crate) fn conv2d_grad_kernel(g: &ConvGeometry, input: &Tensor, grad_out: &Tensor) -> Tensor {
    let p = g.oh * g.ow;
    let k = g.patch_len();
    let mut dk = vec![0.0; k * g.cout];
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    gemm(k, p, g.cout, cols, (1, k), grad_out.data(), (g.cout, 1), 0.0, &mut dk, (g.cout, 1));
    Tensor::from_parts(vec![g.kh, g.kw, g.cin, g.cout], dk)
}

/// Gradient with respect to the input given the upstream output gradient.
pub(crate) fn conv2d_grad_input(g: &ConvGeometry, kernel: &Tensor, grad_out: &Tensor) -> Tensor {
    let p = g.oh * g.ow;
    let k = g.patch_len();
    let mut dcols = vec![0.0; p * k];
    gemm(p, g.cout, k, grad_out.data(), (g.cout, 1), kernel.data(), (1, g.cout), 0.0, &mut dcols, (k, 1));
    let data = if g.is_pointwise() { dcols } else { g.col2im(&dcols) };
    Tensor::from_parts(vec![g.h, g.w, g.cin], data)
}

/// Corner-aligned interpolation taps: `(lower index, upper index, upper weight)`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (libm::floor(src) as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of an HWC tensor, corner-aligned: output corners sit
/// exactly on input corners.
pub fn resample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    ensure!(out_h >= 1 && out_w >= 1, "output size must be positive");
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = input.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            let corners = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (y, x, wgt) in corners {
                let s = &src[(y * w + x) * c..][..c];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += wgt * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
}

/// Adjoint of [`resample_bilinear`]: scatters `grad_out` back onto `h x w`.
pub(crate) fn resample_bilinear_adjoint(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (out_h, out_w, c) = (grad_out.dims()[0], grad_out.dims()[1], grad_out.dims()[2]);
    if (out_h, out_w) == (h, w) {
        return grad_out.clone();
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let g = grad_out.data();
    let mut out = vec![0.0; h * w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let s = &g[(oy * out_w + ox) * c..][..c];
            let corners = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (y, x, wgt) in corners {
                let d = &mut out[(y * w + x) * c..][..c];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += wgt * sv;
                }
            }
        }
    }
    Tensor::from_parts(vec![h, w, c], out)
}
