use serde::{Deserialize, Serialize};

use super::{reflect_index, Image2D};
use crate::error::{Error, Result};

/// Row-major grid of square tiles covering a (reflect-padded) image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TileGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

pub const MIN_TILE_SIZE: usize = 8;

/// Cuts `img` into `tile_size` squares, row-major.
///
/// Sides that are not multiples of `tile_size` are reflect-padded on the
/// right/bottom first. Tiles inherit calibration and depth.
pub fn split_tiles(img: &Image2D, tile_size: usize) -> Result<(Vec<Image2D>, TileGrid)> {
    if tile_size < MIN_TILE_SIZE {
        return Err(Error::Parameter(format!(
            "tile size {tile_size} is below the minimum {MIN_TILE_SIZE}"
        )));
    }
    if tile_size > img.width() || tile_size > img.height() {
        return Err(Error::Size(format!(
            "tile size {tile_size} exceeds the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let grid = TileGrid {
        tile_size,
        rows: img.height().div_ceil(tile_size),
        cols: img.width().div_ceil(tile_size),
    };
    let mut tiles = Vec::with_capacity(grid.count());
    for tr in 0..grid.rows {
        for tc in 0..grid.cols {
            let mut values = Vec::with_capacity(tile_size * tile_size);
            for r in 0..tile_size {
                let sr = reflect_index((tr * tile_size + r) as isize, img.height());
                let row = img.row(sr);
                for c in 0..tile_size {
                    values.push(row[reflect_index((tc * tile_size + c) as isize, img.width())]);
                }
            }
            tiles.push(Image2D::new(
                tile_size,
                tile_size,
                values,
                img.pixel_pitch_nm(),
                img.source_depth(),
            )?);
        }
    }
    Ok((tiles, grid))
}

/// Places tiles back row-major and crops to `target_w` x `target_h`.
pub fn assemble_tiles(tiles: &[Image2D], grid: &TileGrid, target_w: usize, target_h: usize) -> Result<Image2D> {
    if tiles.len() != grid.count() {
        return Err(Error::Grid(format!(
            "{} tiles for a {}x{} grid",
            tiles.len(),
            grid.rows,
            grid.cols
        )));
    }
    let ts = grid.tile_size;
    if let Some((i, t)) = tiles
        .iter()
        .enumerate()
        .find(|(_, t)| t.width() != ts || t.height() != ts)
    {
        return Err(Error::Grid(format!(
            "tile {i} is {}x{}, expected {ts}x{ts}",
            t.width(),
            t.height()
        )));
    }
    if target_w == 0 || target_h == 0 || target_w > grid.cols * ts || target_h > grid.rows * ts {
        return Err(Error::Grid(format!(
            "target {target_w}x{target_h} outside the {}x{} grid extent",
            grid.cols * ts,
            grid.rows * ts
        )));
    }
    let mut values = vec![0.0; target_w * target_h];
    for r in 0..target_h {
        let (tr, ir) = (r / ts, r % ts);
        for c in 0..target_w {
            let (tc, ic) = (c / ts, c % ts);
            values[r * target_w + c] = tiles[tr * grid.cols + tc].get(ir, ic);
        }
    }
    let first = &tiles[0];
    Image2D::new(target_w, target_h, values, first.pixel_pitch_nm(), first.source_depth())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::SourceDepth;
    use proptest::prelude::*;

    #[test]
    fn full_size_split_gives_sixteen_tiles() {
        let img = Image2D::from_fn(2048, 2048, 62.5, SourceDepth::U8, |r, c| ((r + c) % 256) as f64).unwrap();
        let (tiles, grid) = split_tiles(&img, 512).unwrap();
        assert_eq!(tiles.len(), 16);
        assert_eq!((grid.rows, grid.cols), (4, 4));
        let back = assemble_tiles(&tiles, &grid, 2048, 2048).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn single_tile_is_identity() {
        let img = Image2D::from_fn(32, 32, 1.0, SourceDepth::F32, |r, c| (r * 32 + c) as f64).unwrap();
        let (tiles, grid) = split_tiles(&img, 32).unwrap();
        assert_eq!(tiles, vec![img.clone()]);
        assert_eq!(assemble_tiles(&tiles, &grid, 32, 32).unwrap(), img);
    }

    #[test]
    fn non_divisible_grid() {
        let img = Image2D::from_fn(100, 70, 1.0, SourceDepth::F32, |r, c| (r * 100 + c) as f64).unwrap();
        let (tiles, grid) = split_tiles(&img, 32).unwrap();
        assert_eq!((grid.rows, grid.cols), (3, 4));
        assert_eq!(tiles.len(), 12);
        // Padding mirrors the last column.
        let last = &tiles[3];
        assert_eq!(last.get(0, 100 - 96), img.get(0, 99));
        assert_eq!(last.get(0, 101 - 96), img.get(0, 98));
        assert_eq!(assemble_tiles(&tiles, &grid, 100, 70).unwrap(), img);
    }

    #[test]
    fn errors() {
        let img = Image2D::zeros(20, 20, 1.0, SourceDepth::U8).unwrap();
        assert!(matches!(split_tiles(&img, 4), Err(Error::Parameter(_))));
        assert!(matches!(split_tiles(&img, 32), Err(Error::Size(_))));
        let (tiles, grid) = split_tiles(&img, 8).unwrap();
        assert!(matches!(assemble_tiles(&tiles[1..], &grid, 20, 20), Err(Error::Grid(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn split_assemble_roundtrip(w in 8usize..90, h in 8usize..90, ts in 8usize..40, seed in 0u64..1000) {
            prop_assume!(ts <= w && ts <= h);
            let img = Image2D::from_fn(w, h, 1.0, SourceDepth::F32, |r, c| {
                ((r as u64 * 7919 + c as u64 * 104729 + seed) % 1013) as f64 * 0.37
            }).unwrap();
            let (tiles, grid) = split_tiles(&img, ts).unwrap();
            prop_assert_eq!(assemble_tiles(&tiles, &grid, w, h).unwrap(), img);
        }
    }
}
