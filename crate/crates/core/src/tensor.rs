//! Dense row-major tensors.
//!
//! Image-like tensors use `[height, width, channels]` (HWC) layout; scalars
//! are stored with dims `[1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `dims` matches the payload length and
    /// that every value is finite.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(!dims.is_empty(), "tensor needs at least one dimension");
        ensure!(dims.iter().all(|&d| d > 0), "tensor dims must be positive, got {:?}", dims);
        let n: usize = dims.iter().product();
        ensure!(n == data.len(), "dims {:?} need {} values, got {}", dims, n, data.len());
        ensure!(data.iter().all(|v| v.is_finite()), "tensor values must be finite");
        Ok(Self { dims: dims.to_vec(), data })
    }

    /// Unchecked constructor for internal kernels whose output shape is known.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Standard-normal entries drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.sample(StandardNormal))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `(height, width, channels)` for a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        ensure!(self.dims.len() == 3, "expected an HWC tensor, got dims {:?}", self.dims);
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        ensure!(n == self.data.len(), "cannot reshape {:?} into {:?}", self.dims, dims);
        Ok(Self::from_parts(dims.to_vec(), self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure!(self.dims == other.dims, "shape mismatch {:?} vs {:?}", self.dims, other.dims);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        ensure!(self.dims == other.dims, "shape mismatch {:?} vs {:?}", self.dims, other.dims);
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Copies channel range `start..end` of an HWC tensor.
    pub fn channels(&self, start: usize, end: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        ensure!(start < end && end <= c, "channel range {}..{} outside 0..{}", start, end, c);
        let k = end - start;
        let mut out = Vec::with_capacity(h * w * k);
        for px in self.data.chunks_exact(c) {
            out.extend_from_slice(&px[start..end]);
        }
        Ok(Self::from_parts(vec![h, w, k], out))
    }

    /// Concatenates HWC tensors with equal spatial size along channels.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "nothing to concatenate");
        let (h, w, _) = parts[0].hwc()?;
        let mut total = 0;
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            ensure!((ph, pw) == (h, w), "spatial mismatch {}x{} vs {}x{}", ph, pw, h, w);
            total += pc;
        }
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for p in parts {
                let c = p.dims[2];
                out.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Ok(Self::from_parts(vec![h, w, total], out))
    }

    /// Sub-window `[y0..y0+h, x0..x0+w]` of an HWC tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (th, tw, c) = self.hwc()?;
        ensure!(h > 0 && w > 0 && y0 + h <= th && x0 + w <= tw, "crop out of bounds");
        let mut out = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let row = (y * tw + x0) * c;
            out.extend_from_slice(&self.data[row..row + w * c]);
        }
        Ok(Self::from_parts(vec![h, w, c], out))
    }

    /// Pads an HWC tensor to `h x w` by mirroring its bottom and right edges.
    pub fn pad_reflect(&self, h: usize, w: usize) -> Result<Self> {
        let (th, tw, c) = self.hwc()?;
        ensure!(h >= th && w >= tw, "reflect padding cannot shrink a tensor");
        let mirror = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let sy = mirror(y, th);
            for x in 0..w {
                let sx = mirror(x, tw);
                let at = (sy * tw + sx) * c;
                out.extend_from_slice(&self.data[at..at + c]);
            }
        }
        Ok(Self::from_parts(vec![h, w, c], out))
    }
}
