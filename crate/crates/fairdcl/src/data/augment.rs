use ndarray::{Array2, Array3};
use rand::Rng;

use super::ImageTile;
use crate::error::{FairdclError, Result};

/// Color-space augmentation settings for pre-training view pairs.
/// Spatial content is never changed so dense local features stay aligned.
#[derive(Debug, Clone, Copy)]
pub struct ColorJitterConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
}

impl Default for ColorJitterConfig {
    fn default() -> Self {
        ColorJitterConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
        }
    }
}

fn luma(px: &[f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d) % 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let h = if h < 0.0 { h + 1.0 } else { h };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
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
    (r + m, g + m, b + m)
}

fn jitter_view<R: Rng>(pixels: &Array3<f32>, cfg: &ColorJitterConfig, rng: &mut R) -> Array3<f32> {
    let mut out = pixels.clone();
    let apply_jitter = rng.gen_bool(cfg.jitter_prob);
    let fb = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
    let fc = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
    let fs = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
    let fh = rng.gen_range(-cfg.hue..=cfg.hue);
    let apply_gray = rng.gen_bool(cfg.grayscale_prob);
    let (h, w, _) = out.dim();
    if apply_jitter {
        // brightness
        out.mapv_inplace(|v| v * fb);
        // contrast around the mean luma
        let mut mean = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                mean += luma(&[out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]]);
            }
        }
        mean /= (h * w) as f32;
        out.mapv_inplace(|v| (v - mean) * fc + mean);
        // saturation towards per-pixel luma
        for y in 0..h {
            for x in 0..w {
                let g = luma(&[out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]]);
                for c in 0..3 {
                    out[[y, x, c]] = g + (out[[y, x, c]] - g) * fs;
                }
            }
        }
        // hue rotation (fraction of a full turn)
        if fh != 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let (r, g, b) = (
                        out[[y, x, 0]].clamp(0.0, 1.0),
                        out[[y, x, 1]].clamp(0.0, 1.0),
                        out[[y, x, 2]].clamp(0.0, 1.0),
                    );
                    let (hh, ss, vv) = rgb_to_hsv(r, g, b);
                    let (r, g, b) = hsv_to_rgb(hh + fh, ss, vv);
                    out[[y, x, 0]] = r;
                    out[[y, x, 1]] = g;
                    out[[y, x, 2]] = b;
                }
            }
        }
    }
    if apply_gray {
        for y in 0..h {
            for x in 0..w {
                let g = luma(&[out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]]);
                for c in 0..3 {
                    out[[y, x, c]] = g;
                }
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Two independently color-augmented views of one tile. Spatial layout is
/// untouched by contract.
pub fn augment_pretrain<R: Rng>(
    tile: &ImageTile,
    cfg: &ColorJitterConfig,
    rng: &mut R,
) -> (Array3<f32>, Array3<f32>) {
    let v1 = jitter_view(&tile.pixels, cfg, rng);
    let v2 = jitter_view(&tile.pixels, cfg, rng);
    (v1, v2)
}

fn flip_h(pixels: &mut Array3<f32>, mask: &mut Array2<u8>) {
    pixels.invert_axis(ndarray::Axis(1));
    mask.invert_axis(ndarray::Axis(1));
}

fn flip_v(pixels: &mut Array3<f32>, mask: &mut Array2<u8>) {
    pixels.invert_axis(ndarray::Axis(0));
    mask.invert_axis(ndarray::Axis(0));
}

fn rot90(pixels: &Array3<f32>, mask: &Array2<u8>) -> (Array3<f32>, Array2<u8>) {
    // clockwise: (y, x) -> (x, H-1-y)
    let (h, w, c) = pixels.dim();
    let mut p = Array3::<f32>::zeros((w, h, c));
    let mut m = Array2::<u8>::zeros((w, h));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                p[[x, h - 1 - y, ch]] = pixels[[y, x, ch]];
            }
            m[[x, h - 1 - y]] = mask[[y, x]];
        }
    }
    (p, m)
}

/// Random flips and 90-degree rotations applied identically to pixels and
/// mask. Rotations are restricted to right angles so mask labels stay exact.
pub fn augment_finetune<R: Rng>(tile: &ImageTile, rng: &mut R) -> Result<ImageTile> {
    let mask = tile
        .mask
        .as_ref()
        .ok_or_else(|| FairdclError::Manifest(format!("tile {} has no mask", tile.id)))?;
    let mut pixels = tile.pixels.clone();
    let mut mask = mask.clone();
    if rng.gen_bool(0.5) {
        flip_h(&mut pixels, &mut mask);
    }
    if rng.gen_bool(0.5) {
        flip_v(&mut pixels, &mut mask);
    }
    let turns = rng.gen_range(0..4u32);
    for _ in 0..turns {
        let (p, m) = rot90(&pixels.as_standard_layout().to_owned(), &mask);
        pixels = p;
        mask = m;
    }
    Ok(ImageTile {
        pixels: pixels.as_standard_layout().to_owned(),
        mask: Some(mask),
        group: tile.group,
        split: tile.split,
        id: tile.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::rng::derive_rng;
    use std::collections::HashMap;

    fn test_tile(with_mask: bool) -> ImageTile {
        let pixels = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| {
            ((y * 4 + x) as f32 / 16.0 + c as f32 * 0.1).min(1.0)
        });
        let mask = with_mask
            .then(|| Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as u8));
        ImageTile {
            pixels,
            mask,
            group: 0,
            split: Split::Pretrain,
            id: "t".into(),
        }
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let cfg = ColorJitterConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            jitter_prob: 1.0,
            grayscale_prob: 0.0,
        };
        let tile = test_tile(false);
        let mut rng = derive_rng(1, &[0]);
        let (v1, v2) = augment_pretrain(&tile, &cfg, &mut rng);
        let diff1: f32 = (&v1 - &tile.pixels).iter().map(|d| d.abs()).sum();
        let diff2: f32 = (&v2 - &tile.pixels).iter().map(|d| d.abs()).sum();
        assert!(diff1 < 1e-5 && diff2 < 1e-5);
    }

    #[test]
    fn grayscale_makes_channels_equal() {
        let cfg = ColorJitterConfig {
            grayscale_prob: 1.0,
            jitter_prob: 0.0,
            ..Default::default()
        };
        let tile = test_tile(false);
        let mut rng = derive_rng(2, &[0]);
        let (v1, _) = augment_pretrain(&tile, &cfg, &mut rng);
        for y in 0..4 {
            for x in 0..4 {
                assert!((v1[[y, x, 0]] - v1[[y, x, 1]]).abs() < 1e-6);
                assert!((v1[[y, x, 1]] - v1[[y, x, 2]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pretrain_views_keep_shape_and_range() {
        let tile = test_tile(false);
        let cfg = ColorJitterConfig::default();
        for seed in 0..20 {
            let mut rng = derive_rng(seed, &[7]);
            let (v1, v2) = augment_pretrain(&tile, &cfg, &mut rng);
            assert_eq!(v1.dim(), tile.pixels.dim());
            assert_eq!(v2.dim(), tile.pixels.dim());
            assert!(v1.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(v2.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn finetune_preserves_label_multiset() {
        let tile = test_tile(true);
        let count = |m: &Array2<u8>| {
            let mut h = HashMap::new();
            for &v in m.iter() {
                *h.entry(v).or_insert(0usize) += 1;
            }
            h
        };
        let before = count(tile.mask.as_ref().unwrap());
        for seed in 0..30 {
            let mut rng = derive_rng(seed, &[3]);
            let out = augment_finetune(&tile, &mut rng).unwrap();
            assert_eq!(count(out.mask.as_ref().unwrap()), before);
        }
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let tile = test_tile(true);
        let mut p = tile.pixels.clone();
        let mut m = tile.mask.clone().unwrap();
        flip_h(&mut p, &mut m);
        flip_h(&mut p, &mut m);
        assert_eq!(p, tile.pixels);
        assert_eq!(m, tile.mask.unwrap());
    }

    #[test]
    fn rot180_equals_flip_both() {
        let tile = test_tile(true);
        let (p1, m1) = rot90(&tile.pixels, tile.mask.as_ref().unwrap());
        let (p2, m2) = rot90(&p1, &m1);
        let mut p3 = tile.pixels.clone();
        let mut m3 = tile.mask.clone().unwrap();
        flip_h(&mut p3, &mut m3);
        flip_v(&mut p3, &mut m3);
        assert_eq!(p2, p3.as_standard_layout().to_owned());
        assert_eq!(m2, m3.as_standard_layout().to_owned());
    }

    #[test]
    fn missing_mask_is_an_error() {
        let tile = test_tile(false);
        let mut rng = derive_rng(0, &[0]);
        assert!(augment_finetune(&tile, &mut rng).is_err());
    }
}
