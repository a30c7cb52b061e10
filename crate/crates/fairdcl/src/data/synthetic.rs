//! Desk-scale biased-scene generator.
//!
//! Object class is determined by a robust feature (shape: a full-width strip
//! vs. a cluster of blobs) while the rendering style (color palette) is
//! drawn correlated with the tile's sensitive group: with probability `rho`
//! the style is the group-typical palette, otherwise a palette is drawn
//! uniformly at random over all groups (style-blind), so `rho = 0` yields
//! style independent of group and `rho = 1` a deterministic link.
//! Backgrounds are neutral gray so only object style carries group
//! information.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use super::manifest::{DatasetManifest, ManifestEntry};
use super::{save_image, save_mask, ImageTile, Split};
use crate::error::{FairdclError, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub num_tiles: usize,
    pub tile_size: usize,
    pub num_classes: usize,
    pub k: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_tiles: 512,
            tile_size: 64,
            num_classes: 3,
            k: 2,
            rho: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(FairdclError::Config(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        if self.tile_size < 32 {
            return Err(FairdclError::Config("tile_size must be >= 32".into()));
        }
        if self.k < 2 {
            return Err(FairdclError::Config("need at least 2 groups".into()));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(FairdclError::Config(
                "generator supports 2 or 3 classes (background + shapes)".into(),
            ));
        }
        if self.num_tiles == 0 {
            return Err(FairdclError::Config("num_tiles must be positive".into()));
        }
        Ok(())
    }
}

/// Generated tiles plus the per-tile style index (which palette was used)
/// and whether that style was drawn as group-typical, kept for bias audits.
pub struct SyntheticOutput {
    pub manifest: DatasetManifest,
    pub tiles: Vec<ImageTile>,
    pub styles: Vec<usize>,
    pub typical: Vec<bool>,
}

/// Group-typical palette. Group information is purely chromatic: hue
/// separates the palettes and saturation droops for later ones (their
/// objects render closer to gray, so a chroma-reliant model has weaker
/// features for them). Object brightness — the cue that separates classes
/// from the gray background — is identical across palettes and deliberately
/// low-contrast, so chroma is the salient signal while brightness/shape is
/// the group-invariant one: removing group information does not remove
/// class information.
fn palette(style: usize, k: usize) -> ((f32, f32, f32), (f32, f32, f32)) {
    let t = if k > 1 {
        style as f32 / (k - 1) as f32
    } else {
        0.0
    };
    let hue = (0.05 + 0.53 * style as f32) % 1.0;
    let sat = 0.85 - 0.60 * t;
    let strip = (hue, sat, 0.70);
    let blob = ((hue + 0.05) % 1.0, sat, 0.34);
    (strip, blob)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

const TAG_TILE: u64 = 0x5459;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticOutput> {
    spec.validate()?;
    let n = spec.num_tiles;
    let k = spec.k;
    let ts = spec.tile_size;

    // Split schedule per group position: 18% test, then 90/10 pretrain/finetune.
    let per_group = |g: usize| (n + k - 1 - g) / k;
    let split_of = |g: usize, j: usize| {
        let m = per_group(g);
        let test = ((m as f64) * 0.18).round() as usize;
        if j < test {
            Split::Test
        } else {
            let rest = m - test;
            let pre = ((rest as f64) * 0.9).round() as usize;
            if j - test < pre {
                Split::Pretrain
            } else {
                Split::Finetune
            }
        }
    };

    let mut tiles = Vec::with_capacity(n);
    let mut styles = Vec::with_capacity(n);
    let mut typical = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let group = i % k;
        let j = i / k;
        let split = split_of(group, j);
        let mut rng = derive_rng(spec.seed, &[TAG_TILE, i as u64]);

        // style: group-typical with probability rho, else style-blind
        let is_typical = rng.gen_bool(spec.rho);
        let style = if is_typical { group } else { rng.gen_range(0..k) };

        let (strip_hsv, blob_hsv) = palette(style, k);
        let mut pixels = Array3::<f32>::zeros((ts, ts, 3));
        let mut mask = Array2::<u8>::zeros((ts, ts));

        // neutral gray background with per-pixel noise
        let base = rng.gen_range(0.44..0.56f32);
        for y in 0..ts {
            for x in 0..ts {
                let g = (base + rng.gen_range(-0.03..0.03f32)).clamp(0.0, 1.0);
                for c in 0..3 {
                    pixels[[y, x, c]] = g;
                }
            }
        }

        // class 1: full-span strip (elongated shape)
        {
            let jitter = [
                rng.gen_range(-0.04..0.04f32),
                rng.gen_range(-0.04..0.04f32),
                rng.gen_range(-0.04..0.04f32),
            ];
            let color = hsv_to_rgb(strip_hsv.0, strip_hsv.1, strip_hsv.2);
            let width = rng.gen_range(5..10usize);
            let horizontal = rng.gen_bool(0.5);
            let pos = rng.gen_range(0..ts - width);
            for t in 0..ts {
                for dw in 0..width {
                    let (y, x) = if horizontal { (pos + dw, t) } else { (t, pos + dw) };
                    for c in 0..3 {
                        let noise = rng.gen_range(-0.02..0.02f32);
                        pixels[[y, x, c]] = (color[c] + jitter[c] + noise).clamp(0.0, 1.0);
                    }
                    mask[[y, x]] = 1;
                }
            }
        }

        // class 2: blob cluster
        if spec.num_classes >= 3 {
            let jitter = [
                rng.gen_range(-0.04..0.04f32),
                rng.gen_range(-0.04..0.04f32),
                rng.gen_range(-0.04..0.04f32),
            ];
            let color = hsv_to_rgb(blob_hsv.0, blob_hsv.1, blob_hsv.2);
            let count = rng.gen_range(3..7usize);
            let span = ts / 2;
            let cy = rng.gen_range(0..ts - span);
            let cx = rng.gen_range(0..ts - span);
            for _ in 0..count {
                let bh = rng.gen_range(5..11usize).min(span);
                let bw = rng.gen_range(5..11usize).min(span);
                let y0 = cy + rng.gen_range(0..span - bh + 1);
                let x0 = cx + rng.gen_range(0..span - bw + 1);
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        for c in 0..3 {
                            let noise = rng.gen_range(-0.02..0.02f32);
                            pixels[[y, x, c]] = (color[c] + jitter[c] + noise).clamp(0.0, 1.0);
                        }
                        mask[[y, x]] = 2;
                    }
                }
            }
        }

        let id = format!("tile{i:05}");
        entries.push(ManifestEntry {
            id: id.clone(),
            image: format!("images/{id}.png").into(),
            mask: Some(format!("masks/{id}.png").into()),
            group,
            split,
        });
        tiles.push(ImageTile {
            pixels,
            mask: Some(mask),
            group,
            split,
            id,
        });
        styles.push(style);
        typical.push(is_typical);
    }

    let manifest = DatasetManifest {
        entries,
        group_names: (0..k).map(|g| format!("group{g}")).collect(),
        class_names: match spec.num_classes {
            2 => vec!["background".into(), "strip".into()],
            _ => vec!["background".into(), "strip".into(), "blob".into()],
        },
        root: std::path::PathBuf::from("."),
    };
    Ok(SyntheticOutput {
        manifest,
        tiles,
        styles,
        typical,
    })
}

/// Materialize a generated dataset: `manifest.csv` + sidecar, and PNG
/// images/masks. Returns the manifest path.
pub fn write_dataset(out: &SyntheticOutput, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for tile in &out.tiles {
        save_image(&dir.join(format!("images/{}.png", tile.id)), &tile.pixels)?;
        save_mask(
            &dir.join(format!("masks/{}.png", tile.id)),
            tile.mask.as_ref().expect("synthetic tiles carry masks"),
        )?;
    }
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = out.manifest.clone();
    manifest.root = dir.to_path_buf();
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

/// Mean hue over saturated (object) pixels; background gray is excluded.
/// Used by bias audits and tests.
pub fn mean_object_hue(pixels: &Array3<f32>) -> f32 {
    let (h, w, _) = pixels.dim();
    let mut total = 0.0f32;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (pixels[[y, x, 0]], pixels[[y, x, 1]], pixels[[y, x, 2]]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            if max <= 0.0 || (max - min) / max < 0.15 {
                continue;
            }
            let d = max - min;
            let hue = if max == r {
                (((g - b) / d).rem_euclid(6.0)) / 6.0
            } else if max == g {
                ((b - r) / d + 2.0) / 6.0
            } else {
                ((r - g) / d + 4.0) / 6.0
            };
            total += hue;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f32
    }
}
