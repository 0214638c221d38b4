//! Fusion of multi-timestep diffusion features into a 3-channel image, the
//! multi-channel gradient and intensity losses, and head training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::denoiser::{random_crop, Denoiser, DenoiserConfig, DiffusionFeatureStack, LEAKY_SLOPE, SIZE_MULTIPLE, STAGES};
use crate::diffusion::{q_sample, MultiChannelImage};
use crate::error::{ensure, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// How the fused image's gradient enters the gradient loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientLoss {
    /// `| |Gx| + |Gy| - target |`: fused edge magnitude against the larger
    /// source magnitude.
    #[default]
    Magnitude,
    /// `| (Gx + Gy) - target |`: the signed Sobel response against the
    /// (non-negative) target, kept for comparison experiments.
    Signed,
}

/// Architecture and inference settings of the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Timesteps the denoiser features are taken at.
    pub timesteps: Vec<usize>,
    /// Common width every stage is projected to before summation.
    pub feature_width: usize,
    pub hidden_width: usize,
    /// `false` runs the ablation: features of the clean image at `t = 1`
    /// stand in for every timestep slot.
    pub use_diffusion_features: bool,
    pub gradient_loss: GradientLoss,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![5, 50, 100],
            feature_width: 32,
            hidden_width: 32,
            use_diffusion_features: true,
            gradient_loss: GradientLoss::Magnitude,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, denoiser: &Denoiser) -> Result<()> {
        ensure!(!self.timesteps.is_empty(), "at least one feature timestep is required");
        for &t in &self.timesteps {
            denoiser.schedule().check_timestep(t)?;
        }
        ensure!(self.feature_width >= 1 && self.hidden_width >= 1, "fusion widths must be positive");
        Ok(())
    }
}

/// A `H x W x 3` fused image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage(Tensor);

impl FusedImage {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, _, c) = tensor.hwc()?;
        ensure!(c == 3, "fused image needs 3 channels, got {c}");
        ensure!(tensor.data().iter().all(|v| (0.0..=1.0).contains(v)), "fused values must lie in [0, 1]");
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Learnable part of the fusion path: per-stage 1x1 projections and the
/// three 3x3 convolutions of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    config: FusionConfig,
    stage_widths: [usize; STAGES],
    params: ParamStore,
}

const PROJ_SLOTS: usize = 2 * STAGES;

impl FusionHead {
    /// Fan-in scaled kernels, zero biases, zero final layer (initial output
    /// is a constant 0.5).
    pub fn new<R: Rng + ?Sized>(config: FusionConfig, denoiser: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut init = |fan_in: usize, dims: &[usize]| {
            let std = libm::sqrt(2.0 / fan_in as f64);
            Tensor::from_fn(dims, |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        let stage_widths = core::array::from_fn(|i| denoiser.up_width(i));
        let cf = config.feature_width;
        let hidden = config.hidden_width;
        let mut params = ParamStore::new();
        for (s, &w) in stage_widths.iter().enumerate() {
            params.push(&format!("proj{s}.kernel"), init(w, &[1, 1, w, cf]))?;
            params.push(&format!("proj{s}.bias"), Tensor::zeros(&[cf]))?;
        }
        let fused_in = cf * config.timesteps.len();
        params.push("fuse0.kernel", init(9 * fused_in, &[3, 3, fused_in, hidden]))?;
        params.push("fuse0.bias", Tensor::zeros(&[hidden]))?;
        params.push("fuse1.kernel", init(9 * hidden, &[3, 3, hidden, hidden]))?;
        params.push("fuse1.bias", Tensor::zeros(&[hidden]))?;
        params.push("fuse2.kernel", Tensor::zeros(&[3, 3, hidden, 3]))?;
        params.push("fuse2.bias", Tensor::zeros(&[3]))?;
        Ok(Self { config, stage_widths, params })
    }

    /// Rebuilds from stored tensors, checking names and shapes.
    pub fn from_params(config: FusionConfig, denoiser: &DenoiserConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, denoiser, &mut ChaCha8Rng::seed_from_u64(0))?;
        ensure!(params.len() == template.params.len(), "expected {} tensors, got {}", template.params.len(), params.len());
        for ((n1, t1), (n2, t2)) in template.params.iter().zip(params.iter()) {
            ensure!(n1 == n2, "expected parameter {n1:?}, found {n2:?}");
            ensure!(t1.dims() == t2.dims(), "{n1}: expected dims {:?}, found {:?}", t1.dims(), t2.dims());
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Projects each stage to the common width, resamples it to full size
    /// and sums; the per-timestep sums are concatenated along channels.
    ///
    /// Projection runs before resampling: both are linear and resampling
    /// preserves constants, so the order does not change the result.
    pub fn aggregate_on_tape(&self, tape: &mut Tape, p: &BoundParams, stacks: &[Vec<Var>]) -> Result<Var> {
        ensure!(
            stacks.len() == self.config.timesteps.len(),
            "expected {} feature stacks, got {}",
            self.config.timesteps.len(),
            stacks.len()
        );
        let mut per_step = Vec::with_capacity(stacks.len());
        let (h, w, _) = tape.value(stacks[0][STAGES - 1]).hwc()?;
        for stack in stacks {
            ensure!(stack.len() == STAGES, "feature stack needs {STAGES} maps");
            let (sh, sw, _) = tape.value(stack[STAGES - 1]).hwc()?;
            ensure!((sh, sw) == (h, w), "feature stacks disagree on size: {sh}x{sw} vs {h}x{w}");
            let mut sum: Option<Var> = None;
            for (s, &map) in stack.iter().enumerate() {
                let (_, _, c) = tape.value(map).hwc()?;
                ensure!(c == self.stage_widths[s], "stage {s} has {c} channels, head expects {}", self.stage_widths[s]);
                let proj = tape.conv2d(map, p.var(2 * s), 1, 0)?;
                let proj = tape.channel_bias(proj, p.var(2 * s + 1))?;
                let up = tape.resample_bilinear(proj, h, w)?;
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, up)?,
                    None => up,
                });
            }
            per_step.push(sum.expect("five stages"));
        }
        tape.concat_channels(&per_step)
    }

    /// Three 3x3 convolutions (Leaky ReLU, Leaky ReLU, Tanh) mapped to `[0, 1]`.
    pub fn head_on_tape(&self, tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Var> {
        let expected = self.config.feature_width * self.config.timesteps.len();
        let (_, _, c) = tape.value(features).hwc()?;
        ensure!(c == expected, "fusion head expects {expected} feature channels, got {c}");
        let mut h = features;
        for layer in 0..3 {
            let slot = PROJ_SLOTS + 2 * layer;
            h = tape.conv2d(h, p.var(slot), 1, 1)?;
            h = tape.channel_bias(h, p.var(slot + 1))?;
            h = if layer < 2 { tape.leaky_relu(h, LEAKY_SLOPE) } else { tape.tanh(h) };
        }
        let half = tape.scale(h, 0.5);
        Ok(tape.offset(half, 0.5))
    }

    fn stacks_on_tape(tape: &mut Tape, stacks: &[DiffusionFeatureStack]) -> Vec<Vec<Var>> {
        stacks.iter().map(|s| s.maps().iter().map(|m| tape.constant(m.clone())).collect()).collect()
    }

    pub fn aggregate_features(&self, stacks: &[DiffusionFeatureStack]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let vars = Self::stacks_on_tape(&mut tape, stacks);
        let out = self.aggregate_on_tape(&mut tape, &p, &vars)?;
        Ok(tape.value(out).clone())
    }

    pub fn fusion_head(&self, features: &Tensor) -> Result<FusedImage> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let out = self.head_on_tape(&mut tape, &p, f)?;
        // tanh saturates to exactly +-1 in floating point; clamp guards the
        // rounding of the affine map.
        FusedImage::new(tape.value(out).map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Feature stacks for `image` at every configured timestep, noised with
/// draws from `rng` (or the clean `t = 1` stack for the ablation).
pub fn collect_features<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    image: &MultiChannelImage,
    config: &FusionConfig,
    rng: &mut R,
) -> Result<Vec<DiffusionFeatureStack>> {
    if !config.use_diffusion_features {
        let clean = denoiser.extract_features(image, 1)?;
        return Ok(vec![clean; config.timesteps.len()]);
    }
    config
        .timesteps
        .iter()
        .map(|&t| {
            let gamma = Tensor::randn(image.tensor().dims(), rng);
            let noisy = q_sample(image, t, &gamma, denoiser.schedule())?;
            denoiser.extract_features(&noisy.image, t)
        })
        .collect()
}

fn depthwise(kernel3x3: [f64; 9], channels: usize) -> Tensor {
    let mut k = Tensor::zeros(&[3, 3, channels, channels]);
    for (tap, &v) in kernel3x3.iter().enumerate() {
        for c in 0..channels {
            k.data_mut()[(tap * channels + c) * channels + c] = v;
        }
    }
    k
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Horizontal and vertical 3x3 Sobel responses, zero padded, per channel.
pub fn sobel_xy(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = image.hwc()?;
    ensure!(h >= 3 && w >= 3, "Sobel needs at least 3x3, got {h}x{w}");
    let gx = crate::ops::conv2d(image, &depthwise(SOBEL_X, c), 1, 1)?;
    let gy = crate::ops::conv2d(image, &depthwise(SOBEL_Y, c), 1, 1)?;
    Ok((gx, gy))
}

/// Per-channel gradient magnitude `|Gx| + |Gy|`.
pub fn sobel_gradient(image: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel_xy(image)?;
    gx.zip_map(&gy, |a, b| a.abs() + b.abs())
}

fn check_sources(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<(usize, usize)> {
    let (h, w, c) = fused.hwc()?;
    ensure!(c == 3, "fused image needs 3 channels, got {c}");
    ensure!(ir.dims() == [h, w, 1], "infrared dims {:?} do not match fused {h}x{w}", ir.dims());
    ensure!(vis.dims() == [h, w, 3], "visible dims {:?} do not match fused {h}x{w}x3", vis.dims());
    Ok((h, w))
}

/// Elementwise `max(ir, vis_i)` over the three visible channels.
fn max_target(ir: &Tensor, vis: &Tensor) -> Tensor {
    let data = vis.data().chunks_exact(3).zip(ir.data()).flat_map(|(px, &i)| px.iter().map(move |&v| v.max(i))).collect();
    Tensor::from_parts(vis.dims().to_vec(), data)
}

fn gradient_target(ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    Ok(max_target(&sobel_gradient(ir)?, &sobel_gradient(vis)?))
}

/// Multi-channel gradient loss on the tape; `fused` is `H x W x 3`.
pub fn loss_mcg_on_tape(tape: &mut Tape, fused: Var, ir: &Tensor, vis: &Tensor, mode: GradientLoss) -> Result<Var> {
    let (h, w) = check_sources(tape.value(fused), ir, vis)?;
    ensure!(h >= 3 && w >= 3, "gradient loss needs at least 3x3, got {h}x{w}");
    let kx = tape.constant(depthwise(SOBEL_X, 3));
    let ky = tape.constant(depthwise(SOBEL_Y, 3));
    let gx = tape.conv2d(fused, kx, 1, 1)?;
    let gy = tape.conv2d(fused, ky, 1, 1)?;
    let grad = match mode {
        GradientLoss::Magnitude => {
            let ax = tape.abs(gx);
            let ay = tape.abs(gy);
            tape.add(ax, ay)?
        }
        GradientLoss::Signed => tape.add(gx, gy)?,
    };
    let target = tape.constant(gradient_target(ir, vis)?);
    let diff = tape.sub(grad, target)?;
    let l1 = tape.abs(diff);
    let total = tape.sum(l1);
    Ok(tape.scale(total, 1.0 / (h * w) as f64))
}

/// Multi-channel intensity loss on the tape.
pub fn loss_mci_on_tape(tape: &mut Tape, fused: Var, ir: &Tensor, vis: &Tensor) -> Result<Var> {
    let (h, w) = check_sources(tape.value(fused), ir, vis)?;
    let target = tape.constant(max_target(ir, vis));
    let diff = tape.sub(fused, target)?;
    let l1 = tape.abs(diff);
    let total = tape.sum(l1);
    Ok(tape.scale(total, 1.0 / (h * w) as f64))
}

/// Gradient loss plus intensity loss.
pub fn loss_fusion_on_tape(tape: &mut Tape, fused: Var, ir: &Tensor, vis: &Tensor, mode: GradientLoss) -> Result<Var> {
    let g = loss_mcg_on_tape(tape, fused, ir, vis, mode)?;
    let i = loss_mci_on_tape(tape, fused, ir, vis)?;
    tape.add(g, i)
}

fn eval_loss(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, fused: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(fused.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

pub fn loss_mcg(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<f64> {
    eval_loss(|t, v| loss_mcg_on_tape(t, v, ir, vis, GradientLoss::Magnitude), fused)
}

pub fn loss_mci(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<f64> {
    eval_loss(|t, v| loss_mci_on_tape(t, v, ir, vis), fused)
}

pub fn loss_fusion(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<f64> {
    eval_loss(|t, v| loss_fusion_on_tape(t, v, ir, vis, GradientLoss::Magnitude), fused)
}

/// Fuses one joint image. Feature noise comes from a generator seeded with
/// `seed`; sizes that are not multiples of 16 are reflect-padded and the
/// result cropped back.
pub fn fuse(image: &MultiChannelImage, denoiser: &Denoiser, head: &FusionHead, seed: u64) -> Result<FusedImage> {
    head.config.validate(denoiser)?;
    let (h, w) = (image.height(), image.width());
    let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let padded = if (ph, pw) == (h, w) { image.clone() } else { MultiChannelImage::new(image.tensor().pad_reflect(ph, pw)?)? };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stacks = collect_features(denoiser, &padded, &head.config, &mut rng)?;
    let features = head.aggregate_features(&stacks)?;
    let fused = head.fusion_head(&features)?;
    if (ph, pw) == (h, w) {
        Ok(fused)
    } else {
        FusedImage::new(fused.into_tensor().crop(0, 0, h, w)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrainConfig {
    pub crop: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self { crop: 160, batch_size: 24, epochs: 300, learning_rate: 1e-4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionHistory {
    /// Mean step loss of every epoch.
    pub epochs: Vec<f64>,
    pub steps: Vec<f64>,
}

/// Mean fusion loss of a batch on a fresh tape, with the head bound as
/// trainable when `trainable`.
fn batch_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &BoundParams,
    head: &FusionHead,
    denoiser: &Denoiser,
    batch: &[MultiChannelImage],
    rng: &mut R,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for item in batch {
        let stacks = collect_features(denoiser, item, &head.config, rng)?;
        let vars = FusionHead::stacks_on_tape(tape, &stacks);
        let features = head.aggregate_on_tape(tape, p, &vars)?;
        let fused = head.head_on_tape(tape, p, features)?;
        let (vis, ir) = item.to_sources();
        let l = loss_fusion_on_tape(tape, fused, &ir, &vis, head.config.gradient_loss)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Trains the head with Adam on random crops; the denoiser stays frozen.
/// One epoch visits every image once in shuffled batches.
pub fn train_fusion<R: Rng + ?Sized>(
    head: &mut FusionHead,
    denoiser: &Denoiser,
    data: &[MultiChannelImage],
    cfg: &FusionTrainConfig,
    rng: &mut R,
) -> Result<FusionHistory> {
    ensure!(!data.is_empty(), "training set is empty");
    ensure!(cfg.batch_size >= 1, "batch size must be at least 1");
    ensure!(cfg.crop > 0 && cfg.crop.is_multiple_of(SIZE_MULTIPLE), "crop {} must be a positive multiple of {SIZE_MULTIPLE}", cfg.crop);
    head.config.validate(denoiser)?;
    let mut state = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), head.params.tensors());
    let mut history = FusionHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch.push(MultiChannelImage::new(random_crop(data[i].tensor(), Some(cfg.crop), rng)?)?);
            }
            let mut tape = Tape::new();
            let p = head.params.bind(&mut tape, true);
            let loss = batch_loss(&mut tape, &p, head, denoiser, &batch, rng)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let grads = p.gradients(&grads, &head.params);
            drop(tape);
            adam_step(head.params.tensors_mut(), &grads, &mut state)?;
            history.steps.push(value);
            epoch_total += value;
            epoch_steps += 1;
        }
        history.epochs.push(epoch_total / epoch_steps as f64);
    }
    Ok(history)
}

/// Mean fusion loss over `data` without updating anything.
pub fn evaluate_fusion_loss<R: Rng + ?Sized>(
    head: &FusionHead,
    denoiser: &Denoiser,
    data: &[MultiChannelImage],
    rng: &mut R,
) -> Result<f64> {
    ensure!(!data.is_empty(), "evaluation set is empty");
    let mut total = 0.0;
    for item in data {
        let mut tape = Tape::new();
        let p = head.params.bind(&mut tape, false);
        let loss = batch_loss(&mut tape, &p, head, denoiser, core::slice::from_ref(item), rng)?;
        total += tape.value(loss).item();
    }
    Ok(total / data.len() as f64)
}
