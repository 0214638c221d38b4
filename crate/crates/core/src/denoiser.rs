//! Noise-prediction U-Net with taps on its five expansive stages.
//!
//! Layout for base width `w` on an `H x W x 4` input:
//!
//! ```text
//! down0  3x3 s1   4   -> w     H
//! down1  3x3 s2   w   -> 2w    H/2
//! down2  3x3 s2   2w  -> 4w    H/4
//! down3  3x3 s2   4w  -> 8w    H/8
//! down4  3x3 s2   8w  -> 16w   H/16
//! up0    3x3      16w -> 16w   H/16
//! up1    2x + [down3] -> 8w    H/8
//! up2    2x + [down2] -> 4w    H/4
//! up3    2x + [down1] -> 2w    H/2
//! up4    2x + [down0] -> w     H
//! head   3x3      w   -> 4     H
//! ```
//!
//! Every stage adds a per-channel bias plus a learned projection of the
//! sinusoidal timestep embedding, followed by Leaky ReLU. `2x` is bilinear
//! upsampling and `[..]` a channel concatenation of the matching skip.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{diffusion_loss, MultiChannelImage, NoiseLoss, NoisePredictor, NoiseSchedule, JOINT_CHANNELS};
use crate::error::{ensure, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const STAGES: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { base_width: 16, embed_dim: 64 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_width >= 4, "base width must be at least 4, got {}", self.base_width);
        ensure!(self.embed_dim >= 2 && self.embed_dim.is_multiple_of(2), "embedding dim must be even, got {}", self.embed_dim);
        Ok(())
    }

    fn down_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Output width of expansive stage `i` (coarsest first).
    pub fn up_width(&self, stage: usize) -> usize {
        self.base_width << (STAGES - 1 - stage)
    }

    /// `(name, in, out)` for every convolution, in parameter order.
    fn layers(&self) -> Vec<(alloc::string::String, usize, usize)> {
        let mut out = Vec::new();
        for i in 0..STAGES {
            let cin = if i == 0 { JOINT_CHANNELS } else { self.down_width(i - 1) };
            out.push((format!("down{i}"), cin, self.down_width(i)));
        }
        for i in 0..STAGES {
            let cin = if i == 0 { self.down_width(STAGES - 1) } else { self.up_width(i - 1) + self.down_width(STAGES - 1 - i) };
            out.push((format!("up{i}"), cin, self.up_width(i)));
        }
        out
    }
}

/// Sinusoidal embedding: interleaved `sin(t * f_k), cos(t * f_k)` with
/// `f_k = 10000^(-2k/dim)`.
pub fn timestep_embed(t: usize, dim: usize) -> Result<Tensor> {
    ensure!(dim >= 2 && dim.is_multiple_of(2), "embedding dim must be even, got {dim}");
    let mut v = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = libm::pow(10000.0, -2.0 * k as f64 / dim as f64);
        let arg = t as f64 * freq;
        v.push(libm::sin(arg));
        v.push(libm::cos(arg));
    }
    Ok(Tensor::from_parts(alloc::vec![dim], v))
}

/// Expansive-path activations at one timestep, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFeatureStack {
    pub t: usize,
    maps: Vec<Tensor>,
}

impl DiffusionFeatureStack {
    /// Checks that there are five maps on the `H/16 .. H` ladder.
    pub fn new(t: usize, maps: Vec<Tensor>) -> Result<Self> {
        ensure!(maps.len() == STAGES, "feature stack needs {STAGES} maps, got {}", maps.len());
        let (h, w, _) = maps[STAGES - 1].hwc()?;
        for (i, m) in maps.iter().enumerate() {
            let (mh, mw, _) = m.hwc()?;
            let shift = STAGES - 1 - i;
            ensure!(
                mh << shift == h && mw << shift == w,
                "stage {i} is {mh}x{mw}, expected {}x{}",
                h >> shift,
                w >> shift
            );
        }
        Ok(Self { t, maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn height(&self) -> usize {
        self.maps[STAGES - 1].dims()[0]
    }

    pub fn width(&self) -> usize {
        self.maps[STAGES - 1].dims()[1]
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub noise: Var,
    pub features: [Var; STAGES],
}

/// The noise predictor: configuration, parameters and the schedule it was
/// trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
}

impl Denoiser {
    /// Fan-in scaled normal kernels and time projections, zero biases and a
    /// zero head (initial predictions are exactly zero).
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        Self::build(config, schedule, |fan_in, dims| {
            let std = libm::sqrt(2.0 / fan_in as f64);
            Tensor::from_fn(dims, |_| std * rng.sample::<f64, _>(StandardNormal))
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: DenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        Self::build(config, schedule, |_, dims| Tensor::zeros(dims))
    }

    fn build(
        config: DenoiserConfig,
        schedule: NoiseSchedule,
        mut init: impl FnMut(usize, &[usize]) -> Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let mut params = ParamStore::new();
        for (name, cin, cout) in config.layers() {
            params.push(&format!("{name}.kernel"), init(9 * cin, &[3, 3, cin, cout]))?;
            params.push(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
            params.push(&format!("{name}.time"), init(e, &[e, cout]))?;
        }
        params.push("head.kernel", Tensor::zeros(&[3, 3, config.base_width, JOINT_CHANNELS]))?;
        params.push("head.bias", Tensor::zeros(&[JOINT_CHANNELS]))?;
        Ok(Self { config, schedule, params })
    }

    /// Rebuilds from stored tensors, checking names and shapes against the
    /// configuration.
    pub fn from_params(config: DenoiserConfig, schedule: NoiseSchedule, params: ParamStore) -> Result<Self> {
        let template = Self::zeros(config, schedule.clone())?;
        ensure!(params.len() == template.params.len(), "expected {} tensors, got {}", template.params.len(), params.len());
        for ((n1, t1), (n2, t2)) in template.params.iter().zip(params.iter()) {
            ensure!(n1 == n2, "expected parameter {n1:?}, found {n2:?}");
            ensure!(t1.dims() == t2.dims(), "{n1}: expected dims {:?}, found {:?}", t1.dims(), t2.dims());
        }
        Ok(Self { config, schedule, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w, c) = x.hwc()?;
        ensure!(c == JOINT_CHANNELS, "denoiser input needs 4 channels, got {c}");
        ensure!(
            h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 && h > 0 && w > 0,
            "input {h}x{w} must be a multiple of {SIZE_MULTIPLE} on both sides"
        );
        Ok(())
    }

    fn stage(&self, tape: &mut Tape, p: &BoundParams, slot: usize, x: Var, emb: Var, stride: usize) -> Result<Var> {
        let h = tape.conv2d(x, p.var(slot), stride, 1)?;
        let proj = tape.matvec(emb, p.var(slot + 2))?;
        let bias = tape.add(proj, p.var(slot + 1))?;
        let h = tape.channel_bias(h, bias)?;
        Ok(tape.leaky_relu(h, LEAKY_SLOPE))
    }

    /// Full forward pass; returns the predicted noise and the five
    /// expansive-stage activations.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, t: usize) -> Result<DenoiserOutput> {
        self.check_input(tape.value(x))?;
        self.schedule.check_timestep(t)?;
        let emb = tape.constant(timestep_embed(t, self.config.embed_dim)?);
        let mut skips = Vec::with_capacity(STAGES);
        let mut h = x;
        for i in 0..STAGES {
            h = self.stage(tape, p, 3 * i, h, emb, if i == 0 { 1 } else { 2 })?;
            skips.push(h);
        }
        let mut features = [h; STAGES];
        for i in 0..STAGES {
            if i > 0 {
                let skip = skips[STAGES - 1 - i];
                let (sh, sw, _) = tape.value(skip).hwc()?;
                let up = tape.resample_bilinear(h, sh, sw)?;
                h = tape.concat_channels(&[up, skip])?;
            }
            h = self.stage(tape, p, 3 * (STAGES + i), h, emb, 1)?;
            features[i] = h;
        }
        let head = 6 * STAGES;
        let out = tape.conv2d(h, p.var(head), 1, 1)?;
        let noise = tape.channel_bias(out, p.var(head + 1))?;
        Ok(DenoiserOutput { noise, features })
    }

    pub fn predict_noise(&self, x: &MultiChannelImage, t: usize) -> Result<Tensor> {
        NoisePredictor::predict(self, x, t)
    }

    pub fn extract_features(&self, x: &MultiChannelImage, t: usize) -> Result<DiffusionFeatureStack> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.tensor().clone());
        let out = self.forward(&mut tape, &p, xv, t)?;
        let maps = out.features.iter().map(|v| tape.value(*v).clone()).collect();
        DiffusionFeatureStack::new(t, maps)
    }
}

impl NoisePredictor for Denoiser {
    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.params.bind(tape, trainable)
    }

    fn predict_on_tape(&self, tape: &mut Tape, params: &BoundParams, x: Var, t: usize) -> Result<Var> {
        Ok(self.forward(tape, params, x, t)?.noise)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Square crop side; `None` trains on full images.
    pub crop: Option<usize>,
    pub adam: AdamConfig,
    pub loss: NoiseLoss,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 4, crop: None, adam: AdamConfig::with_learning_rate(1e-4), loss: NoiseLoss::Norm }
    }
}

/// Random `size x size` crop (the whole image when it already fits).
pub(crate) fn random_crop<R: Rng + ?Sized>(img: &Tensor, size: Option<usize>, rng: &mut R) -> Result<Tensor> {
    let (h, w, _) = img.hwc()?;
    let Some(size) = size else { return Ok(img.clone()) };
    ensure!(size <= h && size <= w, "crop {size} larger than image {h}x{w}");
    if size == h && size == w {
        return Ok(img.clone());
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    img.crop(y, x, size, size)
}

/// Trains the denoiser on `data` with Adam; returns the per-step loss.
pub fn train_diffusion<R: Rng + ?Sized>(
    denoiser: &mut Denoiser,
    data: &[MultiChannelImage],
    cfg: &DiffusionTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    ensure!(!data.is_empty(), "training set is empty");
    ensure!(cfg.batch_size >= 1, "batch size must be at least 1");
    if let Some(c) = cfg.crop {
        ensure!(c % SIZE_MULTIPLE == 0 && c > 0, "crop {c} must be a positive multiple of {SIZE_MULTIPLE}");
    }
    let mut state = AdamState::new(cfg.adam, denoiser.params.tensors());
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let item = &data[rng.random_range(0..data.len())];
            batch.push(MultiChannelImage::new(random_crop(item.tensor(), cfg.crop, rng)?)?);
        }
        let mut tape = Tape::new();
        let p = denoiser.params.bind(&mut tape, true);
        let out = diffusion_loss(&mut tape, &batch, denoiser, &p, &denoiser.schedule, rng, cfg.loss)?;
        history.push(tape.value(out.loss).item());
        let grads = tape.backward(out.loss)?;
        let grads = p.gradients(&grads, &denoiser.params);
        drop(tape);
        adam_step(denoiser.params.tensors_mut(), &grads, &mut state)?;
    }
    Ok(history)
}
