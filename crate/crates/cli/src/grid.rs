//! Image grids with black gutters.

use image::{Rgb, RgbImage};
use ndarray::Axis;
use vaewgan::data::to_rgb_image;
use vaewgan::ImageBatch;

pub const GUTTER: u32 = 2;

pub fn to_images(batch: &ImageBatch) -> Vec<RgbImage> {
    batch.axis_iter(Axis(0)).map(|x| to_rgb_image(&x.to_owned())).collect()
}

/// Columns of the most square row-major layout for `n` cells.
pub fn square_cols(n: usize) -> usize {
    (1..=n.max(1)).find(|c| c * c >= n).unwrap_or(1)
}

/// Tiles equally sized `cells` row-major into `cols` columns, with a
/// `GUTTER`-pixel black border around and between cells.
pub fn tile(cells: &[RgbImage], cols: usize) -> RgbImage {
    let cols = cols.max(1);
    let rows = cells.len().div_ceil(cols).max(1);
    let (w, h) = cells.first().map(|c| c.dimensions()).unwrap_or((0, 0));
    let grid_w = cols as u32 * (w + GUTTER) + GUTTER;
    let grid_h = rows as u32 * (h + GUTTER) + GUTTER;
    let mut out = RgbImage::from_pixel(grid_w, grid_h, Rgb([0, 0, 0]));
    for (i, cell) in cells.iter().enumerate() {
        let x0 = GUTTER + (i % cols) as u32 * (w + GUTTER);
        let y0 = GUTTER + (i / cols) as u32 * (h + GUTTER);
        image::imageops::replace(&mut out, cell, x0 as i64, y0 as i64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_arithmetic() {
        assert_eq!(square_cols(64), 8);
        assert_eq!(square_cols(65), 9);
        assert_eq!(square_cols(1), 1);
        let cells = vec![RgbImage::from_pixel(4, 3, Rgb([255, 255, 255])); 16];
        let g = tile(&cells, 8);
        assert_eq!(g.dimensions(), (8 * 6 + 2, 2 * 5 + 2));
        assert_eq!(g.get_pixel(0, 0), &Rgb([0, 0, 0]));
        assert_eq!(g.get_pixel(2, 2), &Rgb([255, 255, 255]));
        assert_eq!(g.get_pixel(6, 2), &Rgb([0, 0, 0]));
        assert_eq!(g.get_pixel(8, 2), &Rgb([255, 255, 255]));
    }
}
