//! Command-line surface: dataset generation, both training stages, fusion,
//! sampling and evaluation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ivfuse_core::denoiser::{train_diffusion, Denoiser};
use ivfuse_core::diffusion::sample_pair;
use ivfuse_core::fusion::{fuse, train_fusion, FusionHead};
use ivfuse_core::metrics::evaluate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_denoiser, load_fusion_head, save_denoiser, save_fusion_head};
use crate::config::RunConfig;
use crate::dataset::{gen_synthetic, DatasetManifest};
use crate::error::{Error, Result};
use crate::image_io::{load_rgb, save_image};

pub const DENOISER_FILE: &str = "denoiser.difz";
pub const FUSION_FILE: &str = "fusion.difz";
pub const FUSED_DIR: &str = "fused";

#[derive(Debug, Parser)]
#[command(name = "ivfuse", version, about = "Infrared/visible image fusion with diffusion features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset (PNGs, thermal masks, manifest).
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Trains the noise-prediction network on the joint 4-channel images.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        /// Manifest file or dataset folder.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains the fusion head on features of a frozen denoiser.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Denoiser checkpoint (default: `<out>/denoiser.difz`).
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Use clean-image features at t = 1 instead of noisy multi-timestep ones.
        #[arg(long)]
        no_diffusion: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuses every pair of a dataset into `<out>/fused/<id>.png`.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Fusion head checkpoint (default: `<out>/fusion.difz`).
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draws visible/infrared pairs by ancestral sampling.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scores fused images (`<fused>/<id>.png`) against their sources.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Folder of fused images (default: `<out>/fused`).
        #[arg(long)]
        fused: Option<PathBuf>,
    },
}

/// What a run writes next to its outputs so it can be repeated.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    inputs: BTreeMap<&'a str, String>,
    config: &'a RunConfig,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_record(dir: &Path, command: &str, inputs: BTreeMap<&str, String>, cfg: &RunConfig) -> Result<()> {
    let record = RunRecord { command, version: env!("CARGO_PKG_VERSION"), inputs, config: cfg };
    let text = toml::to_string(&record).map_err(|e| Error::InvalidArgument(format!("cannot serialize run record: {e}")))?;
    write_text(&dir.join(format!("run-{command}.toml")), &text)
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn load_training_images(data: &Path) -> Result<Vec<ivfuse_core::diffusion::MultiChannelImage>> {
    let manifest = DatasetManifest::open(data)?;
    if manifest.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no pairs", data.display())));
    }
    manifest.load_images()
}

fn check_pairing(head_expects: &ivfuse_core::denoiser::DenoiserConfig, denoiser: &Denoiser) -> Result<()> {
    if head_expects != denoiser.config() {
        return Err(Error::InvalidArgument(format!(
            "fusion head was trained for denoiser {head_expects:?}, checkpoint holds {:?}",
            denoiser.config()
        )));
    }
    Ok(())
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { out, count, height, width, seed, split } => {
            let manifest = gen_synthetic(&out, count, height, width, seed, &split)?;
            create_dir(&out)?;
            let inputs = BTreeMap::from([
                ("count", count.to_string()),
                ("height", height.to_string()),
                ("width", width.to_string()),
                ("seed", seed.to_string()),
                ("split", split),
            ]);
            write_record(&out, "gen-synthetic", inputs, &RunConfig::default())?;
            println!("wrote {} pairs to {}", manifest.len(), out.display());
        }
        Command::TrainDiffusion { common, data, steps, batch_size, lr, seed } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = steps {
                cfg.diffusion_training.steps = v;
            }
            if let Some(v) = batch_size {
                cfg.diffusion_training.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.diffusion_training.learning_rate = v;
            }
            if let Some(v) = seed {
                cfg.seeds.diffusion = v;
            }
            cfg.validate()?;
            let images = load_training_images(&data)?;
            let out = cfg.output.dir.clone();
            create_dir(&out)?;
            let mut denoiser = Denoiser::new(cfg.denoiser_config(), cfg.schedule()?, &mut ChaCha8Rng::seed_from_u64(cfg.seeds.init))?;
            let history = train_diffusion(&mut denoiser, &images, &cfg.diffusion_train_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seeds.diffusion))?;
            save_denoiser(&denoiser, &out.join(DENOISER_FILE))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in history.iter().enumerate() {
                let _ = writeln!(csv, "{},{l:.9}", i + 1);
            }
            write_text(&out.join("diffusion_loss.csv"), &csv)?;
            write_record(&out, "train-diffusion", BTreeMap::from([("data", path_string(&data))]), &cfg)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("trained {} steps: loss {first:.4} -> {last:.4}", history.len());
            }
        }
        Command::TrainFusion { common, data, denoiser, no_diffusion, epochs, batch_size, crop, lr, seed } => {
            let mut cfg = resolve(&common)?;
            if no_diffusion {
                cfg.fusion.use_diffusion_features = false;
            }
            if let Some(v) = epochs {
                cfg.fusion_training.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.fusion_training.batch_size = v;
            }
            if let Some(v) = crop {
                cfg.fusion_training.crop = v;
            }
            if let Some(v) = lr {
                cfg.fusion_training.learning_rate = v;
            }
            if let Some(v) = seed {
                cfg.seeds.fusion = v;
            }
            cfg.validate()?;
            let out = cfg.output.dir.clone();
            let denoiser_path = denoiser.unwrap_or_else(|| out.join(DENOISER_FILE));
            let denoiser = load_denoiser(&denoiser_path)?;
            let images = load_training_images(&data)?;
            create_dir(&out)?;
            let mut init = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
            init.set_stream(1);
            let mut head = FusionHead::new(cfg.fusion_config(), denoiser.config(), &mut init)?;
            let history = train_fusion(&mut head, &denoiser, &images, &cfg.fusion_train_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seeds.fusion))?;
            save_fusion_head(&head, denoiser.config(), &out.join(FUSION_FILE))?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in history.epochs.iter().enumerate() {
                let _ = writeln!(csv, "{},{l:.9}", i + 1);
            }
            write_text(&out.join("fusion_loss.csv"), &csv)?;
            let inputs = BTreeMap::from([("data", path_string(&data)), ("denoiser", path_string(&denoiser_path))]);
            write_record(&out, "train-fusion", inputs, &cfg)?;
            if let (Some(first), Some(last)) = (history.epochs.first(), history.epochs.last()) {
                println!("trained {} epochs: loss {first:.4} -> {last:.4}", history.epochs.len());
            }
        }
        Command::Fuse { common, data, denoiser, head, seed } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = seed {
                cfg.seeds.fuse = v;
            }
            let out = cfg.output.dir.clone();
            let denoiser_path = denoiser.unwrap_or_else(|| out.join(DENOISER_FILE));
            let head_path = head.unwrap_or_else(|| out.join(FUSION_FILE));
            let denoiser = load_denoiser(&denoiser_path)?;
            let (head, expects) = load_fusion_head(&head_path)?;
            check_pairing(&expects, &denoiser)?;
            let manifest = DatasetManifest::open(&data)?;
            let fused_dir = out.join(FUSED_DIR);
            create_dir(&fused_dir)?;
            for (i, pair) in manifest.load_eval_pairs()?.iter().enumerate() {
                let image = ivfuse_core::diffusion::MultiChannelImage::from_sources(&pair.visible, &pair.infrared)?;
                let fused = fuse(&image, &denoiser, &head, cfg.seeds.fuse.wrapping_add(i as u64))?;
                save_image(fused.tensor(), &fused_dir.join(format!("{}.png", pair.id)))?;
            }
            let inputs = BTreeMap::from([
                ("data", path_string(&data)),
                ("denoiser", path_string(&denoiser_path)),
                ("head", path_string(&head_path)),
            ]);
            write_record(&out, "fuse", inputs, &cfg)?;
            println!("fused {} pairs into {}", manifest.len(), fused_dir.display());
        }
        Command::Sample { common, denoiser, count, height, width, seed } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = seed {
                cfg.seeds.sample = v;
            }
            let out = cfg.output.dir.clone();
            let denoiser_path = denoiser.unwrap_or_else(|| out.join(DENOISER_FILE));
            let denoiser = load_denoiser(&denoiser_path)?;
            let dir = out.join("samples");
            create_dir(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.sample);
            for i in 0..count {
                let pair = sample_pair(&denoiser, denoiser.schedule(), height, width, &mut rng)?;
                let (vis, ir) = pair.to_sources();
                save_image(&vis, &dir.join(format!("sample{i:04}_vi.png")))?;
                save_image(&ir, &dir.join(format!("sample{i:04}_ir.png")))?;
            }
            let inputs = BTreeMap::from([
                ("denoiser", path_string(&denoiser_path)),
                ("count", count.to_string()),
                ("height", height.to_string()),
                ("width", width.to_string()),
            ]);
            write_record(&out, "sample", inputs, &cfg)?;
            println!("wrote {count} sampled pairs to {}", dir.display());
        }
        Command::Eval { common, data, fused } => {
            let cfg = resolve(&common)?;
            let out = cfg.output.dir.clone();
            let fused_dir = fused.unwrap_or_else(|| out.join(FUSED_DIR));
            let pairs = DatasetManifest::open(&data)?.load_eval_pairs()?;
            let images = pairs.iter().map(|p| load_rgb(&fused_dir.join(format!("{}.png", p.id)))).collect::<Result<Vec<_>>>()?;
            let report = evaluate(&pairs, &images)?;
            create_dir(&out)?;
            write_text(&out.join("metrics.txt"), &report.to_table())?;
            write_text(&out.join("metrics.csv"), &report.to_records())?;
            let inputs = BTreeMap::from([("data", path_string(&data)), ("fused", path_string(&fused_dir))]);
            write_record(&out, "eval", inputs, &cfg)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the process exit
/// code: 0 on success, 2 for usage errors, 1 for anything else.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
