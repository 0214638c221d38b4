//! 8-bit PNG reading and writing for `H x W x C` tensors in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ivfuse_core::diffusion::MultiChannelImage;
use ivfuse_core::metrics::LUMA;
use ivfuse_core::Tensor;

use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

fn unit(byte: u8) -> f64 {
    f64::from(byte) / 255.0
}

/// Reads any decodable image as `H x W x 3`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::new(&[h as usize, w as usize, 3], img.into_raw().into_iter().map(unit).collect())?)
}

/// Reads an image as `H x W x 1`; color files are collapsed by luminance.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if img.color().has_color() {
        img.into_rgb8().pixels().map(|p| (LUMA[0] * unit(p[0]) + LUMA[1] * unit(p[1]) + LUMA[2] * unit(p[2])).clamp(0.0, 1.0)).collect()
    } else {
        img.into_luma8().into_raw().into_iter().map(unit).collect()
    };
    Ok(Tensor::new(&[h, w, 1], data)?)
}

/// Reads a visible/infrared pair as `(H x W x 3, H x W x 1)` in `[0, 1]`.
pub fn load_sources(visible: &Path, infrared: &Path) -> Result<(Tensor, Tensor)> {
    let vis = load_rgb(visible)?;
    let ir = load_gray(infrared)?;
    if vis.dims()[..2] != ir.dims()[..2] {
        return Err(Error::InvalidArgument(format!(
            "size mismatch: {} is {}x{}, {} is {}x{}",
            visible.display(),
            vis.dims()[0],
            vis.dims()[1],
            infrared.display(),
            ir.dims()[0],
            ir.dims()[1]
        )));
    }
    Ok((vis, ir))
}

/// Reads a pair into the joint RGB+IR diffusion representation.
pub fn load_pair(visible: &Path, infrared: &Path) -> Result<MultiChannelImage> {
    let (vis, ir) = load_sources(visible, infrared)?;
    Ok(MultiChannelImage::from_sources(&vis, &ir)?)
}

/// Round-half-up quantization of a `[0, 1]` value to a byte.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel tensor with values in `[0, 1]` as 8-bit PNG.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!("{}: values must lie in [0, 1]", path.display())));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (w as u32, h as u32);
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer sized from dims")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer sized from dims")),
        _ => return Err(Error::InvalidArgument(format!("cannot save {c}-channel image"))),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}
