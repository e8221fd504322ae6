//! Grayscale PNG storage in the `root/split/{images,masks}/*.png` layout.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};
use lsenet_tensor::Tensor;

use super::{SamplePair, Split};
use crate::error::{LsenetError, Result};

/// Mask pixels at or above this 8-bit value are vessel.
pub const MASK_THRESHOLD: u8 = 128;

fn read_luma(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => LsenetError::io(path, io),
        other => LsenetError::format(path, other.to_string()),
    })?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(LsenetError::format(
            path,
            format!("expected 8-bit grayscale, found {:?}", other.color()),
        )),
    }
}

/// Loads an 8-bit grayscale PNG as `[1,H,W]` scaled to `[0,1]`.
pub fn load_gray_png(path: &Path) -> Result<Tensor<f32>> {
    let g = read_luma(path)?;
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new(vec![1, h as usize, w as usize], data)?)
}

fn load_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let g = read_luma(path)?;
    let (w, h) = g.dimensions();
    let data = g
        .into_raw()
        .into_iter()
        .map(|v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(vec![1, h as usize, w as usize], data)?)
}

/// Writes a `[H,W]` or `[1,H,W]` map with values clamped to `[0,1]`.
pub fn save_gray_png(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => {
            return Err(LsenetError::Data(format!(
                "cannot write a {s:?} tensor as a grayscale image"
            )))
        }
    };
    let bytes = map
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from shape");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LsenetError::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => LsenetError::io(path, io),
        other => LsenetError::format(path, other.to_string()),
    })
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| LsenetError::io(dir, e))? {
        let entry = entry.map_err(|e| LsenetError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs from `root/split/images` and `root/split/masks`, sorted by file
/// name. A split directory with no images yields an empty list.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(LsenetError::Data(format!(
            "split directory {} does not exist",
            dir.display()
        )));
    }
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    if !images.is_dir() {
        if masks.is_dir() {
            return Err(LsenetError::Data(format!(
                "images directory {} is missing",
                images.display()
            )));
        }
        return Ok(Vec::new());
    }
    let names = png_names(&images)?;
    if names.is_empty() {
        return Ok(Vec::new());
    }
    if !masks.is_dir() {
        return Err(LsenetError::Data(format!(
            "masks directory {} is missing",
            masks.display()
        )));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let mask_path: PathBuf = masks.join(&name);
        if !mask_path.is_file() {
            return Err(LsenetError::Data(format!(
                "mask {} for image {name} not found",
                mask_path.display()
            )));
        }
        let image = load_gray_png(&images.join(&name))?;
        let mask = load_mask_png(&mask_path)?;
        if image.shape() != mask.shape() {
            return Err(LsenetError::Data(format!(
                "{name}: image {:?} and mask {:?} differ in size",
                image.shape(),
                mask.shape()
            )));
        }
        let id = name
            .rsplit_once('.')
            .map(|(s, _)| s)
            .unwrap_or(&name)
            .to_string();
        out.push(SamplePair::new(image, mask, id)?);
    }
    Ok(out)
}

/// Writes pairs as `<id>.png` into the dataset layout.
pub fn save_dataset(root: &Path, split: Split, pairs: &[SamplePair]) -> Result<()> {
    let dir = root.join(split.as_str());
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| LsenetError::io(&d, e))?;
    }
    for p in pairs {
        let file = format!("{}.png", p.id);
        save_gray_png(&dir.join("images").join(&file), &p.image)?;
        save_gray_png(&dir.join("masks").join(&file), &p.mask)?;
    }
    Ok(())
}
