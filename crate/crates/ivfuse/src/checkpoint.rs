//! The "DIFZ" tensor container and the denoiser / fusion-head files built on it.
//!
//! Layout, all integers u32 little-endian: magic `DIFZ`, version, entry
//! count, then per entry the name length, UTF-8 name, rank, each dim, and the
//! values as f32 little-endian. Tensors live in memory as f64, so saving
//! rounds to f32 once; load and re-save are then bit-exact.

use std::path::Path;

use ivfuse_core::denoiser::{Denoiser, DenoiserConfig};
use ivfuse_core::diffusion::NoiseSchedule;
use ivfuse_core::fusion::{FusionConfig, FusionHead, GradientLoss};
use ivfuse_core::params::ParamStore;
use ivfuse_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DIFZ";
pub const VERSION: u32 = 1;

const META_DENOISER: &str = "meta.denoiser";
const META_SCHEDULE: &str = "meta.schedule.betas";
const META_FUSION: &str = "meta.fusion";
const META_TIMESTEPS: &str = "meta.fusion.timesteps";

pub fn encode(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a DIFZ checkpoint".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| format!("entry name: {e}"))?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| format!("{name}: dims overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| format!("{name}: dims overflow"))?)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        let t = Tensor::new(&dims, data).map_err(|e| format!("{name}: {e}"))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(entries)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_inner(bytes).map_err(|m| Error::format(path, m))
}

pub fn write_entries(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; a missing file is a state error (nothing trained yet).
pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::State(format!("checkpoint {} does not exist; train it first", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode(&bytes, path)
}

fn meta<'a>(entries: &'a [(String, Tensor)], name: &str, path: &Path) -> Result<&'a [f64]> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.data())
        .ok_or_else(|| Error::format(path, format!("missing entry {name:?}")))
}

fn as_count(v: f64, what: &str, path: &Path) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
        Ok(v as usize)
    } else {
        Err(Error::format(path, format!("{what} must be a non-negative integer, got {v}")))
    }
}

fn config_tensor(cfg: &DenoiserConfig) -> Tensor {
    Tensor::new(&[2], vec![cfg.base_width as f64, cfg.embed_dim as f64]).expect("two finite values")
}

fn read_denoiser_config(entries: &[(String, Tensor)], path: &Path) -> Result<DenoiserConfig> {
    let m = meta(entries, META_DENOISER, path)?;
    if m.len() != 2 {
        return Err(Error::format(path, format!("{META_DENOISER} needs 2 values")));
    }
    Ok(DenoiserConfig { base_width: as_count(m[0], "base width", path)?, embed_dim: as_count(m[1], "embedding size", path)? })
}

fn params_from(entries: Vec<(String, Tensor)>) -> Result<ParamStore> {
    let mut params = ParamStore::new();
    for (name, t) in entries.into_iter().filter(|(n, _)| !n.starts_with("meta.")) {
        params.push(&name, t)?;
    }
    Ok(params)
}

pub fn save_denoiser(denoiser: &Denoiser, path: &Path) -> Result<()> {
    let cfg = config_tensor(denoiser.config());
    let betas = Tensor::new(&[denoiser.schedule().timesteps()], denoiser.schedule().betas().to_vec())?;
    let mut entries: Vec<(&str, &Tensor)> = vec![(META_DENOISER, &cfg), (META_SCHEDULE, &betas)];
    entries.extend(denoiser.params().iter());
    write_entries(path, &entries)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let entries = read_entries(path)?;
    let config = read_denoiser_config(&entries, path)?;
    let schedule = NoiseSchedule::from_betas(meta(&entries, META_SCHEDULE, path)?.to_vec())?;
    Ok(Denoiser::from_params(config, schedule, params_from(entries)?)?)
}

/// Saves the head together with the denoiser configuration it was built for.
pub fn save_fusion_head(head: &FusionHead, denoiser: &DenoiserConfig, path: &Path) -> Result<()> {
    let c = head.config();
    let cfg = config_tensor(denoiser);
    let fusion = Tensor::new(
        &[4],
        vec![
            c.feature_width as f64,
            c.hidden_width as f64,
            f64::from(u8::from(c.use_diffusion_features)),
            f64::from(u8::from(c.gradient_loss == GradientLoss::Signed)),
        ],
    )?;
    let steps = Tensor::new(&[c.timesteps.len()], c.timesteps.iter().map(|&t| t as f64).collect())?;
    let mut entries: Vec<(&str, &Tensor)> = vec![(META_DENOISER, &cfg), (META_FUSION, &fusion), (META_TIMESTEPS, &steps)];
    entries.extend(head.params().iter());
    write_entries(path, &entries)
}

/// Loads a head and the denoiser configuration it expects.
pub fn load_fusion_head(path: &Path) -> Result<(FusionHead, DenoiserConfig)> {
    let entries = read_entries(path)?;
    let denoiser = read_denoiser_config(&entries, path)?;
    let m = meta(&entries, META_FUSION, path)?;
    if m.len() != 4 {
        return Err(Error::format(path, format!("{META_FUSION} needs 4 values")));
    }
    let timesteps = meta(&entries, META_TIMESTEPS, path)?
        .iter()
        .map(|&t| as_count(t, "timestep", path))
        .collect::<Result<Vec<_>>>()?;
    let config = FusionConfig {
        timesteps,
        feature_width: as_count(m[0], "feature width", path)?,
        hidden_width: as_count(m[1], "hidden width", path)?,
        use_diffusion_features: m[2] != 0.0,
        gradient_loss: if m[3] != 0.0 { GradientLoss::Signed } else { GradientLoss::Magnitude },
    };
    let head = FusionHead::from_params(config, &denoiser, params_from(entries)?)?;
    Ok((head, denoiser))
}
