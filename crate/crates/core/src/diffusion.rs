//! Joint forward/reverse diffusion over 4-channel visible+infrared images.
//!
//! Timesteps are 1-based: `t = 1..=T`, with the convention `alpha_bar(0) = 1`
//! so the posterior variance at `t = 1` is exactly zero.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::params::BoundParams;
use crate::tensor::Tensor;

/// Number of channels in a joint image: visible R, G, B then infrared.
pub const JOINT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` betas linearly spaced from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(timesteps >= 1, "schedule needs at least one timestep");
        ensure!(
            0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        );
        let beta = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        ensure!(!beta.is_empty(), "schedule needs at least one timestep");
        ensure!(beta.iter().all(|b| *b > 0.0 && *b < 1.0), "every beta must lie in (0, 1)");
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut sigma2 = Vec::with_capacity(beta.len());
        let mut prev = 1.0;
        for (a, b) in alpha.iter().zip(&beta) {
            let cur = a * prev;
            sigma2.push((1.0 - prev) / (1.0 - cur) * b);
            alpha_bar.push(cur);
            prev = cur;
        }
        Ok(Self { beta, alpha, alpha_bar, sigma2 })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.timesteps(), "timestep {t} outside 1..={}", self.timesteps());
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Variance of the reverse conditional at `t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }
}

/// An `H x W x 4` image in diffusion space (values nominally in `[-1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage(Tensor);

impl MultiChannelImage {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, _, c) = tensor.hwc()?;
        ensure!(c == JOINT_CHANNELS, "joint image needs 4 channels, got {c}");
        ensure!(tensor.is_finite(), "joint image values must be finite");
        Ok(Self(tensor))
    }

    /// Joins a `[0, 1]` visible image (3 channels) and infrared image
    /// (1 channel), mapping both to `[-1, 1]`.
    pub fn from_sources(visible: &Tensor, infrared: &Tensor) -> Result<Self> {
        let (vh, vw, vc) = visible.hwc()?;
        let (ih, iw, ic) = infrared.hwc()?;
        ensure!(vc == 3 && ic == 1, "expected 3-channel visible and 1-channel infrared, got {vc} and {ic}");
        ensure!((vh, vw) == (ih, iw), "visible {vh}x{vw} and infrared {ih}x{iw} differ in size");
        let joined = Tensor::concat_channels(&[visible, infrared])?;
        Self::new(joined.map(|v| 2.0 * v - 1.0))
    }

    /// Splits into `([0,1]` visible, `[0,1]` infrared`)`, clamping to
    /// `[-1, 1]` first.
    pub fn to_sources(&self) -> (Tensor, Tensor) {
        let unit = self.0.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5);
        (unit.channels(0, 3).expect("4 channels"), unit.channels(3, 4).expect("4 channels"))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }
}

/// A noisy image at timestep `t` with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub image: MultiChannelImage,
    pub t: usize,
    pub noise: Tensor,
}

/// Anything that predicts the noise in a joint image at a timestep.
///
/// `bind` places the predictor's parameters on the tape so that losses built
/// from [`NoisePredictor::predict_on_tape`] can be differentiated.
pub trait NoisePredictor {
    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams;

    fn predict_on_tape(&self, tape: &mut Tape, params: &BoundParams, x: Var, t: usize) -> Result<Var>;

    fn predict(&self, x: &MultiChannelImage, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.tensor().clone());
        let out = self.predict_on_tape(&mut tape, &params, xv, t)?;
        Ok(tape.value(out).clone())
    }
}

/// Closed-form corruption `sqrt(ab_t) * I0 + sqrt(1 - ab_t) * gamma`.
pub fn q_sample(i0: &MultiChannelImage, t: usize, gamma: &Tensor, s: &NoiseSchedule) -> Result<DiffusionSample> {
    s.check_timestep(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let out = i0.tensor().zip_map(gamma, |x, g| a * x + b * g)?;
    Ok(DiffusionSample { image: MultiChannelImage(out), t, noise: gamma.clone() })
}

/// One Markov step `sqrt(a_t) * I_{t-1} + sqrt(1 - a_t) * gamma` with fresh noise.
pub fn forward_step<R: Rng + ?Sized>(
    prev: &MultiChannelImage,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<MultiChannelImage> {
    s.check_timestep(t)?;
    let gamma = Tensor::randn(prev.tensor().dims(), rng);
    let a = s.alpha(t);
    let (ca, cb) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    let out = prev.tensor().zip_map(&gamma, |x, g| ca * x + cb * g)?;
    Ok(MultiChannelImage(out))
}

/// Mean and variance of the reverse conditional given predicted noise.
pub fn posterior_stats(i_t: &MultiChannelImage, predicted_noise: &Tensor, t: usize, s: &NoiseSchedule) -> Result<(Tensor, f64)> {
    s.check_timestep(t)?;
    let coef = s.beta(t) / libm::sqrt(1.0 - s.alpha_bar(t));
    let inv = 1.0 / libm::sqrt(s.alpha(t));
    let mu = i_t.tensor().zip_map(predicted_noise, |x, e| inv * (x - coef * e))?;
    Ok((mu, s.sigma2(t)))
}

/// One ancestral step `mu + sigma_t * z`; `z` is ignored at `t = 1`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    i_t: &MultiChannelImage,
    t: usize,
    predictor: &P,
    s: &NoiseSchedule,
    z: &Tensor,
) -> Result<MultiChannelImage> {
    s.check_timestep(t)?;
    ensure!(z.dims() == i_t.tensor().dims(), "noise shape {:?} vs image {:?}", z.dims(), i_t.tensor().dims());
    let eps = predictor.predict(i_t, t)?;
    let (mu, sigma2) = posterior_stats(i_t, &eps, t, s)?;
    if t == 1 || sigma2 == 0.0 {
        return MultiChannelImage::new(mu);
    }
    let sigma = libm::sqrt(sigma2);
    MultiChannelImage::new(mu.zip_map(z, |m, zv| m + sigma * zv)?)
}

/// How the per-item noise residual is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseLoss {
    /// `||gamma - eps||_2`, the plain (unsquared) Euclidean norm.
    #[default]
    Norm,
    /// Mean of squared residuals over all entries.
    MeanSquared,
}

#[derive(Debug)]
pub struct DiffusionLoss {
    pub loss: Var,
    pub timesteps: Vec<usize>,
    pub noises: Vec<Tensor>,
}

/// Batch-mean noise-prediction loss with `t ~ U{1..T}` and standard normal
/// noise drawn per item, in batch order.
pub fn diffusion_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape,
    batch: &[MultiChannelImage],
    predictor: &P,
    params: &BoundParams,
    s: &NoiseSchedule,
    rng: &mut R,
    kind: NoiseLoss,
) -> Result<DiffusionLoss> {
    ensure!(!batch.is_empty(), "diffusion loss needs a non-empty batch");
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut noises = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for i0 in batch {
        let t = rng.random_range(1..=s.timesteps());
        let gamma = Tensor::randn(i0.tensor().dims(), rng);
        let noisy = q_sample(i0, t, &gamma, s)?;
        let x = tape.constant(noisy.image.into_tensor());
        let eps = predictor.predict_on_tape(tape, params, x, t)?;
        let target = tape.constant(gamma.clone());
        let resid = tape.sub(target, eps)?;
        let term = match kind {
            NoiseLoss::Norm => tape.l2_norm(resid)?,
            NoiseLoss::MeanSquared => {
                let sq = tape.square(resid);
                tape.mean(sq)
            }
        };
        terms.push(term);
        timesteps.push(t);
        noises.push(gamma);
    }
    let mut total = terms[0];
    for term in &terms[1..] {
        total = tape.add(total, *term)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    Ok(DiffusionLoss { loss, timesteps, noises })
}

/// Ancestral sampling from pure noise at `t = T` down to `t = 1`.
pub fn sample_pair<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    s: &NoiseSchedule,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<MultiChannelImage> {
    ensure!(height > 0 && width > 0, "sample size must be positive");
    let dims = [height, width, JOINT_CHANNELS];
    let mut x = MultiChannelImage::new(Tensor::randn(&dims, rng))?;
    for t in (1..=s.timesteps()).rev() {
        let z = if t > 1 { Tensor::randn(&dims, rng) } else { Tensor::zeros(&dims) };
        x = reverse_step(&x, t, predictor, s, &z)?;
    }
    Ok(x)
}
