//! Pair manifests and synthetic dataset generation.
//!
//! A manifest is UTF-8 text with one `id<TAB>visible<TAB>infrared` line per
//! pair. Lines starting with `#` are comments, except `# split: <tag>` and
//! `# seed: <n>` which carry metadata. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use ivfuse_core::diffusion::MultiChannelImage;
use ivfuse_core::metrics::EvalPair;

use crate::error::{Error, Result};
use crate::image_io::{load_gray, load_sources, save_image};
use crate::synthetic::generate_pair;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub visible: PathBuf,
    pub infrared: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<String>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut manifest = Self::default();
        let mut seen = HashSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(tag) = comment.strip_prefix("split:") {
                    manifest.split = Some(tag.trim().to_string());
                } else if let Some(seed) = comment.strip_prefix("seed:") {
                    let seed = seed.trim().parse().map_err(|_| Error::format(origin, format!("line {}: bad seed {seed:?}", no + 1)))?;
                    manifest.seed = Some(seed);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, vis, ir] = fields[..] else {
                return Err(Error::format(origin, format!("line {}: expected 3 tab-separated fields, got {}", no + 1, fields.len())));
            };
            if !seen.insert(id.to_string()) {
                return Err(Error::format(origin, format!("line {}: duplicate pair id {id:?}", no + 1)));
            }
            manifest.entries.push(ManifestEntry { id: id.to_string(), visible: base.join(vis), infrared: base.join(ir) });
        }
        Ok(manifest)
    }

    /// Reads a manifest file and checks that every referenced image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let manifest = Self::parse(&text, base, path)?;
        for e in &manifest.entries {
            for p in [&e.visible, &e.infrared] {
                if !p.is_file() {
                    return Err(Error::format(path, format!("pair {}: {} does not exist", e.id, p.display())));
                }
            }
        }
        Ok(manifest)
    }

    /// Builds a manifest from a folder with `vi/` and `ir/` subfolders holding
    /// identically named images; ids are the file stems.
    pub fn from_folders(root: &Path) -> Result<Self> {
        let vi = root.join("vi");
        let ir = root.join("ir");
        let mut names: Vec<_> = std::fs::read_dir(&vi)
            .map_err(|e| Error::io(&vi, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut manifest = Self::default();
        for v in names {
            let file = v.file_name().expect("listed files have names");
            let i = ir.join(file);
            if !i.is_file() {
                return Err(Error::format(root, format!("{} has no infrared counterpart {}", v.display(), i.display())));
            }
            let id = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            manifest.entries.push(ManifestEntry { id, visible: v, infrared: i });
        }
        Ok(manifest)
    }

    /// Loads a manifest file, or a `vi/` + `ir/` folder when given a directory.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let file = path.join(MANIFEST_FILE);
            if file.is_file() {
                Self::load(&file)
            } else {
                Self::from_folders(path)
            }
        } else {
            Self::load(path)
        }
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        if let Some(split) = &self.split {
            let _ = writeln!(out, "# split: {split}");
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "# seed: {seed}");
        }
        for e in &self.entries {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
            let _ = writeln!(out, "{}\t{}\t{}", e.id, rel(&e.visible), rel(&e.infrared));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every pair as source images.
    pub fn load_eval_pairs(&self) -> Result<Vec<EvalPair>> {
        self.entries
            .iter()
            .map(|e| {
                let (visible, infrared) = load_sources(&e.visible, &e.infrared)?;
                Ok(EvalPair { id: e.id.clone(), visible, infrared })
            })
            .collect()
    }

    /// Loads every pair in the joint diffusion representation.
    pub fn load_images(&self) -> Result<Vec<MultiChannelImage>> {
        self.load_eval_pairs()?.into_iter().map(|p| Ok(MultiChannelImage::from_sources(&p.visible, &p.infrared)?)).collect()
    }
}

/// Path of the thermal mask written next to a synthetic pair.
pub fn mask_path(dataset_dir: &Path, id: &str) -> PathBuf {
    dataset_dir.join("masks").join(format!("{id}.png"))
}

pub fn load_mask(dataset_dir: &Path, id: &str) -> Result<ivfuse_core::Tensor> {
    load_gray(&mask_path(dataset_dir, id))
}

/// Writes `count` synthetic pairs (visible, infrared, mask PNGs) and a
/// manifest under `dir`. No files are written when `count` is zero.
pub fn gen_synthetic(dir: &Path, count: usize, h: usize, w: usize, seed: u64, split: &str) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest { entries: Vec::with_capacity(count), split: Some(split.to_string()), seed: Some(seed) };
    if count == 0 {
        generate_pair(0, h, w, seed)?;
        return Ok(manifest);
    }
    for i in 0..count {
        let pair = generate_pair(i, h, w, seed)?;
        let vis = dir.join("vi").join(format!("{}.png", pair.id));
        let ir = dir.join("ir").join(format!("{}.png", pair.id));
        save_image(&pair.visible, &vis)?;
        save_image(&pair.infrared, &ir)?;
        save_image(&pair.mask, &mask_path(dir, &pair.id))?;
        manifest.entries.push(ManifestEntry { id: pair.id, visible: vis, infrared: ir });
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_text(dir)).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
