use super::{DatasetKind, Image, ImageSample, Mask, Origin};
use crate::error::{Error, Result};

/// Layout of a zero-padded, non-overlapping tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl TileGrid {
    pub fn for_dims(height: usize, width: usize, tile_size: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::InvalidInput("tile size must be positive".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("cannot tile an empty image".into()));
        }
        let rows = height.div_ceil(tile_size);
        let cols = width.div_ceil(tile_size);
        Ok(Self {
            tile_size,
            rows,
            cols,
            pad_bottom: rows * tile_size - height,
            pad_right: cols * tile_size - width,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn original_dims(&self) -> (usize, usize) {
        (
            self.rows * self.tile_size - self.pad_bottom,
            self.cols * self.tile_size - self.pad_right,
        )
    }
}

/// Cuts `image`/`mask` into `tile_size` squares, row-major, padding the
/// bottom and right edges with zeros.
pub fn tile_image(
    image: &Image,
    mask: &Mask,
    tile_size: usize,
    dataset: DatasetKind,
    source_id: &str,
) -> Result<(Vec<ImageSample>, TileGrid)> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let grid = TileGrid::for_dims(image.height, image.width, tile_size)?;
    let t = tile_size;
    let mut tiles = Vec::with_capacity(grid.len());
    for tr in 0..grid.rows {
        for tc in 0..grid.cols {
            let (r0, c0) = (tr * t, tc * t);
            // Valid (non-padding) extent of this tile.
            let h = t.min(image.height.saturating_sub(r0));
            let w = t.min(image.width.saturating_sub(c0));

            let mut tile_img = Image::zeros(image.channels, t, t);
            for ch in 0..image.channels {
                let src = image.channel(ch);
                let dst = tile_img.channel_mut(ch);
                for r in 0..h {
                    let s = (r0 + r) * image.width + c0;
                    dst[r * t..r * t + w].copy_from_slice(&src[s..s + w]);
                }
            }
            let mut tile_mask = Mask::zeros(t, t);
            for r in 0..h {
                let s = (r0 + r) * mask.width + c0;
                tile_mask.data[r * t..r * t + w].copy_from_slice(&mask.data[s..s + w]);
            }
            let origin = Origin {
                dataset,
                source_id: source_id.to_string(),
                tile: Some((tr, tc)),
            };
            tiles.push(ImageSample::new(tile_img, tile_mask, origin)?);
        }
    }
    Ok((tiles, grid))
}

/// Inverse of [`tile_image`]: stitches row-major tiles and crops the padding.
pub fn reassemble_tiles(tiles: &[ImageSample], grid: &TileGrid) -> Result<(Image, Mask)> {
    if tiles.len() != grid.len() {
        return Err(Error::Shape(format!(
            "expected {} tiles, got {}",
            grid.len(),
            tiles.len()
        )));
    }
    let (height, width) = grid.original_dims();
    let t = grid.tile_size;
    let channels = tiles[0].image.channels;
    let mut image = Image::zeros(channels, height, width);
    let mut mask = Mask::zeros(height, width);
    for (i, tile) in tiles.iter().enumerate() {
        if tile.image.height != t || tile.image.width != t || tile.image.channels != channels {
            return Err(Error::Shape(format!("tile {i} does not match the grid")));
        }
        let (r0, c0) = ((i / grid.cols) * t, (i % grid.cols) * t);
        let h = t.min(height.saturating_sub(r0));
        let w = t.min(width.saturating_sub(c0));
        for ch in 0..channels {
            let src = tile.image.channel(ch);
            let dst = image.channel_mut(ch);
            for r in 0..h {
                let d = (r0 + r) * width + c0;
                dst[d..d + w].copy_from_slice(&src[r * t..r * t + w]);
            }
        }
        for r in 0..h {
            let d = (r0 + r) * width + c0;
            mask.data[d..d + w].copy_from_slice(&tile.mask.data[r * t..r * t + w]);
        }
    }
    Ok((image, mask))
}
