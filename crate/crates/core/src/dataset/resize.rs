use super::grid::{Image, Mask};
use super::{ImageSample, Origin};
use crate::error::{Error, Result};

/// First resampling target for lesion photographs.
pub const LESION_INTERMEDIATE: usize = 480;
/// Final training resolution for lesion photographs.
pub const LESION_SIZE: usize = 224;

fn source_coord(dst: usize, scale: f64, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, (src - lo as f64) as f32)
}

/// Bilinear resampling with half-pixel centres. Same-size resampling is the identity.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let sy = image.height as f64 / height as f64;
    let sx = image.width as f64 / width as f64;
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, sx, image.width)).collect();
    let mut out = Image::zeros(image.channels, height, width);
    for c in 0..image.channels {
        let src = image.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..height {
            let (y0, y1, fy) = source_coord(y, sy, image.height);
            let r0 = &src[y0 * image.width..(y0 + 1) * image.width];
            let r1 = &src[y1 * image.width..(y1 + 1) * image.width];
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[y * width + x] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

fn nearest_index(dst: usize, scale: f64, len: usize) -> usize {
    (((dst as f64 + 0.5) * scale).floor() as usize).min(len - 1)
}

/// Nearest-neighbour resampling followed by re-binarisation at 0.5.
pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let sy = mask.height as f64 / height as f64;
    let sx = mask.width as f64 / width as f64;
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy_idx = nearest_index(y, sy, mask.height);
        for x in 0..width {
            values.push(mask.get(sy_idx, nearest_index(x, sx, mask.width)) as f32);
        }
    }
    Mask::from_threshold(height, width, &values, 0.5)
}

/// Two-step lesion resampling: 480x480, then 224x224.
pub fn resize_lesion_image(image: &Image, mask: &Mask, origin: Origin) -> Result<ImageSample> {
    if image.height < 2 || image.width < 2 {
        return Err(Error::Shape(format!(
            "cannot resample a {}x{} image",
            image.height, image.width
        )));
    }
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let mid = resize_bilinear(image, LESION_INTERMEDIATE, LESION_INTERMEDIATE);
    let mid_mask = resize_nearest(mask, LESION_INTERMEDIATE, LESION_INTERMEDIATE);
    ImageSample::new(
        resize_bilinear(&mid, LESION_SIZE, LESION_SIZE),
        resize_nearest(&mid_mask, LESION_SIZE, LESION_SIZE),
        origin,
    )
}
