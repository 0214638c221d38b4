//! Run configuration read from a TOML file; command-line flags override it.

use std::path::{Path, PathBuf};

use ivfuse_core::denoiser::{DenoiserConfig, DiffusionTrainConfig};
use ivfuse_core::diffusion::{NoiseLoss, NoiseSchedule};
use ivfuse_core::fusion::{FusionConfig, FusionTrainConfig, GradientLoss};
use ivfuse_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { timesteps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self { base_width: d.base_width, embed_dim: d.embed_dim }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLossName {
    Norm,
    MeanSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Square crop side; 0 trains on full images.
    pub crop: usize,
    pub learning_rate: f64,
    pub loss: NoiseLossName,
}

impl Default for DiffusionTrainingSection {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        Self { steps: d.steps, batch_size: d.batch_size, crop: 0, learning_rate: d.adam.learning_rate, loss: NoiseLossName::Norm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientLossName {
    Magnitude,
    Signed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub timesteps: Vec<usize>,
    pub feature_width: usize,
    pub hidden_width: usize,
    pub use_diffusion_features: bool,
    pub gradient_loss: GradientLossName,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            timesteps: f.timesteps,
            feature_width: f.feature_width,
            hidden_width: f.hidden_width,
            use_diffusion_features: f.use_diffusion_features,
            gradient_loss: GradientLossName::Magnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionTrainingSection {
    pub crop: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FusionTrainingSection {
    fn default() -> Self {
        let f = FusionTrainConfig::default();
        Self { crop: f.crop, batch_size: f.batch_size, epochs: f.epochs, learning_rate: f.learning_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub init: u64,
    pub diffusion: u64,
    pub fusion: u64,
    pub fuse: u64,
    pub sample: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { init: 0, diffusion: 1, fusion: 2, fuse: 3, sample: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub diffusion_training: DiffusionTrainingSection,
    pub fusion: FusionSection,
    pub fusion_training: FusionTrainingSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every value against the ranges of the type it configures.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule()?;
        self.denoiser_config().validate()?;
        let t = &self.diffusion_training;
        if t.batch_size == 0 || !t.crop.is_multiple_of(16) || !(t.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("diffusion training needs batch_size >= 1, crop a multiple of 16 and learning_rate >= 0".into()));
        }
        let f = &self.fusion_training;
        if f.batch_size == 0 || f.crop == 0 || !f.crop.is_multiple_of(16) || !(f.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("fusion training needs batch_size >= 1, crop a positive multiple of 16 and learning_rate >= 0".into()));
        }
        let fusion = self.fusion_config();
        if fusion.timesteps.is_empty() || fusion.feature_width == 0 || fusion.hidden_width == 0 {
            return Err(Error::InvalidArgument("fusion needs timesteps and positive widths".into()));
        }
        for &ts in &fusion.timesteps {
            schedule.check_timestep(ts)?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(NoiseSchedule::linear(s.timesteps, s.beta_start, s.beta_end)?)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig { base_width: self.denoiser.base_width, embed_dim: self.denoiser.embed_dim }
    }

    pub fn diffusion_train_config(&self) -> DiffusionTrainConfig {
        let t = &self.diffusion_training;
        DiffusionTrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            crop: (t.crop > 0).then_some(t.crop),
            adam: AdamConfig::with_learning_rate(t.learning_rate),
            loss: match t.loss {
                NoiseLossName::Norm => NoiseLoss::Norm,
                NoiseLossName::MeanSquared => NoiseLoss::MeanSquared,
            },
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        let f = &self.fusion;
        FusionConfig {
            timesteps: f.timesteps.clone(),
            feature_width: f.feature_width,
            hidden_width: f.hidden_width,
            use_diffusion_features: f.use_diffusion_features,
            gradient_loss: match f.gradient_loss {
                GradientLossName::Magnitude => GradientLoss::Magnitude,
                GradientLossName::Signed => GradientLoss::Signed,
            },
        }
    }

    pub fn fusion_train_config(&self) -> FusionTrainConfig {
        let f = &self.fusion_training;
        FusionTrainConfig { crop: f.crop, batch_size: f.batch_size, epochs: f.epochs, learning_rate: f.learning_rate }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml(), Path::new("c")).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("[fusion_training]\ncrop = 32\nepochs = 5\n\n[fusion]\ngradient_loss = \"signed\"\n", Path::new("c")).unwrap();
        assert_eq!(cfg.fusion_training.crop, 32);
        assert_eq!(cfg.fusion_training.epochs, 5);
        assert_eq!(cfg.fusion_training.batch_size, 24);
        assert_eq!(cfg.fusion_config().gradient_loss, GradientLoss::Signed);
        assert_eq!(cfg.schedule.timesteps, 200);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(RunConfig::parse("[schedule]\nsteps = 3\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("[fusion]\ntimesteps = [500]\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("[fusion_training]\ncrop = 20\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("[denoiser]\nembed_dim = 7\n", Path::new("c")).is_err());
    }
}
