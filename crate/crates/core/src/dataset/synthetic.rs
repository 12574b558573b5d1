//! Random-ellipse images with known masks, for desk-scale training checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{Image, Mask};
use super::{DatasetKind, ImageSample, Origin};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    /// Inclusive range of ellipses per image.
    pub blobs: (usize, usize),
    pub noise: f32,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            count: 32,
            size: 64,
            channels: 3,
            blobs: (1, 3),
            noise: 0.08,
        }
    }
}

/// Generates `spec.count` samples; the same seed always yields the same set.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.count)
        .map(|i| blob_sample(spec, &mut rng, i))
        .collect()
}

fn blob_sample(spec: &BlobSpec, rng: &mut ChaCha8Rng, index: usize) -> ImageSample {
    let s = spec.size;
    let sf = s as f32;
    let mut mask = vec![0u8; s * s];
    let n = rng.gen_range(spec.blobs.0..=spec.blobs.1.max(spec.blobs.0));
    for _ in 0..n {
        let cy = rng.gen_range(0.15..0.85) * sf;
        let cx = rng.gen_range(0.15..0.85) * sf;
        let ry = rng.gen_range(0.08..0.25) * sf;
        let rx = rng.gen_range(0.08..0.25) * sf;
        let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let (sin, cos) = theta.sin_cos();
        for y in 0..s {
            for x in 0..s {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    mask[y * s + x] = 1;
                }
            }
        }
    }
    let tint: Vec<f32> = (0..spec.channels).map(|_| rng.gen_range(0.85..1.0)).collect();
    let mut data = Vec::with_capacity(spec.channels * s * s);
    for &t in &tint {
        for &m in &mask {
            let base = if m == 1 { 0.75 } else { 0.25 };
            let v = base * t + rng.gen_range(-spec.noise..=spec.noise);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    ImageSample::new(
        Image::new(spec.channels, s, s, data).expect("sized above"),
        Mask::new(s, s, mask).expect("binary by construction"),
        Origin::whole(DatasetKind::Synthetic, format!("blob{index:04}")),
    )
    .expect("matching dims")
}
