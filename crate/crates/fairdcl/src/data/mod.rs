//! Dataset ingestion, synthetic biased-scene generation and augmentation.

mod augment;
mod manifest;
mod synthetic;
mod tiling;

pub use augment::{augment_finetune, augment_pretrain, ColorJitterConfig};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry};
pub use synthetic::{generate_synthetic, mean_object_hue, write_dataset, SyntheticOutput, SyntheticSpec};
pub use tiling::tile_image;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{FairdclError, Result};

/// Which part of the pipeline a tile belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "finetune" => Ok(Split::Finetune),
            "test" => Ok(Split::Test),
            other => Err(FairdclError::Manifest(format!("unknown split '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }
}

/// One training/evaluation unit: RGB pixels in `[0, 1]`, an optional class
/// mask, a sensitive-group index and a split tag.
#[derive(Debug, Clone)]
pub struct ImageTile {
    /// `(H, W, 3)` intensities in `[0, 1]`.
    pub pixels: Array3<f32>,
    /// `(H, W)` class indices, when annotated.
    pub mask: Option<Array2<u8>>,
    pub group: usize,
    pub split: Split,
    pub id: String,
}

impl ImageTile {
    pub fn validate(&self, num_groups: usize, num_classes: usize) -> Result<()> {
        if let Some(mask) = &self.mask {
            let (h, w, _) = self.pixels.dim();
            if mask.dim() != (h, w) {
                return Err(FairdclError::Shape(format!(
                    "tile {}: mask {:?} does not match pixels {:?}",
                    self.id,
                    mask.dim(),
                    (h, w)
                )));
            }
            if let Some(&bad) = mask.iter().find(|&&v| v as usize >= num_classes) {
                return Err(FairdclError::Manifest(format!(
                    "tile {}: mask value {bad} >= num_classes {num_classes}",
                    self.id
                )));
            }
        }
        if self.group >= num_groups {
            return Err(FairdclError::Manifest(format!(
                "tile {}: group {} out of range ({num_groups} groups)",
                self.id, self.group
            )));
        }
        Ok(())
    }
}

/// Load a PNG as an `(H, W, 3)` array of `[0, 1]` intensities.
pub fn load_image(path: &std::path::Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| FairdclError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Load a single-channel PNG of class indices.
pub fn load_mask(path: &std::path::Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| FairdclError::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32).0[0],
    ))
}

/// Write an `(H, W, 3)` array of `[0, 1]` intensities as an 8-bit RGB PNG.
pub fn save_image(path: &std::path::Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (pixels[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| FairdclError::Image(format!("{}: {e}", path.display())))
}

/// Write an `(H, W)` class-index mask as a single-channel PNG.
pub fn save_mask(path: &std::path::Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]]]));
        }
    }
    img.save(path)
        .map_err(|e| FairdclError::Image(format!("{}: {e}", path.display())))
}
