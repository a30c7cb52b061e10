use ndarray::Array3;

use crate::error::{FairdclError, Result};

/// Split an `(H, W, 3)` image into non-overlapping `tile_size` squares in
/// row-major order. Trailing remainder pixels are dropped.
pub fn tile_image(image: &Array3<f32>, tile_size: usize) -> Result<Vec<Array3<f32>>> {
    let (h, w, c) = image.dim();
    if h < tile_size || w < tile_size {
        return Err(FairdclError::Shape(format!(
            "image {h}x{w} smaller than tile size {tile_size}"
        )));
    }
    let rows = h / tile_size;
    let cols = w / tile_size;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for cl in 0..cols {
            let y0 = r * tile_size;
            let x0 = cl * tile_size;
            let mut tile = Array3::<f32>::zeros((tile_size, tile_size, c));
            tile.assign(&image.slice(ndarray::s![
                y0..y0 + tile_size,
                x0..x0 + tile_size,
                ..
            ]));
            tiles.push(tile);
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_division_yields_four_tiles() {
        let img = Array3::<f32>::zeros((1024, 1024, 3));
        assert_eq!(tile_image(&img, 512).unwrap().len(), 4);
    }

    #[test]
    fn remainders_are_dropped() {
        // floor(1100/512) * floor(600/512) = 2 * 1
        let img = Array3::<f32>::zeros((1100, 600, 3));
        assert_eq!(tile_image(&img, 512).unwrap().len(), 2);
    }

    #[test]
    fn undersized_image_errors() {
        let img = Array3::<f32>::zeros((256, 256, 3));
        assert!(tile_image(&img, 512).is_err());
    }

    #[test]
    fn row_major_order_and_content() {
        let img = Array3::<f32>::from_shape_fn((4, 6, 3), |(y, x, _)| (y * 6 + x) as f32);
        let tiles = tile_image(&img, 2).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles[0][[0, 0, 0]], 0.0);
        assert_eq!(tiles[1][[0, 0, 0]], 2.0); // next column first
        assert_eq!(tiles[3][[0, 0, 0]], 12.0); // second tile row
    }
}
