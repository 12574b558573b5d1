use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Image, Mask};
use super::ImageSample;

/// One step of the training-time augmentation chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugmentStep {
    /// Mirror columns with probability `p`.
    Hflip { p: f64 },
    /// Mirror rows with probability `p`.
    Vflip { p: f64 },
    /// Red-channel normalisation, see [`rnorm`].
    Rnorm,
}

impl AugmentStep {
    pub fn default_chain() -> Vec<AugmentStep> {
        vec![
            AugmentStep::Hflip { p: 0.5 },
            AugmentStep::Vflip { p: 0.5 },
            AugmentStep::Rnorm,
        ]
    }

    /// Random steps only run on the training split; the rest are part of
    /// preprocessing and run everywhere.
    pub fn is_random(&self) -> bool {
        !matches!(self, AugmentStep::Rnorm)
    }

    pub fn name(&self) -> String {
        match self {
            AugmentStep::Hflip { p } => format!("hflip:{p}"),
            AugmentStep::Vflip { p } => format!("vflip:{p}"),
            AugmentStep::Rnorm => "rnorm".to_string(),
        }
    }

    /// Parses `hflip`, `hflip:0.3`, `vflip`, `vflip:0.7` or `rnorm`.
    pub fn parse(s: &str) -> Option<AugmentStep> {
        let (head, prob) = match s.split_once(':') {
            Some((h, p)) => (h, Some(p.parse::<f64>().ok()?)),
            None => (s, None),
        };
        if let Some(p) = prob {
            if !(0.0..=1.0).contains(&p) {
                return None;
            }
        }
        match head {
            "hflip" => Some(AugmentStep::Hflip {
                p: prob.unwrap_or(0.5),
            }),
            "vflip" => Some(AugmentStep::Vflip {
                p: prob.unwrap_or(0.5),
            }),
            "rnorm" if prob.is_none() => Some(AugmentStep::Rnorm),
            _ => None,
        }
    }
}

pub(crate) fn hflip_image(image: &mut Image) {
    let w = image.width;
    for c in 0..image.channels {
        for row in image.channel_mut(c).chunks_exact_mut(w) {
            row.reverse();
        }
    }
}

pub(crate) fn vflip_image(image: &mut Image) {
    let (h, w) = (image.height, image.width);
    for c in 0..image.channels {
        let plane = image.channel_mut(c);
        for r in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - r) * w);
            top[r * w..(r + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

pub(crate) fn hflip_mask(mask: &mut Mask) {
    let w = mask.width;
    for row in mask.data.chunks_exact_mut(w) {
        row.reverse();
    }
}

pub(crate) fn vflip_mask(mask: &mut Mask) {
    let (h, w) = (mask.height, mask.width);
    for r in 0..h / 2 {
        let (top, bottom) = mask.data.split_at_mut((h - 1 - r) * w);
        top[r * w..(r + 1) * w].swap_with_slice(&mut bottom[..w]);
    }
}

fn standardize(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 0.0 {
            ((*v as f64 - mean) / std) as f32
        } else {
            0.0
        };
    }
}

fn min_max(values: &mut [f32]) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Red-channel normalisation.
///
/// The first (red) channel is standardised to zero mean and unit variance
/// over the image; every other channel is min-max rescaled to `[0, 1]`.
/// A single-channel image is simply standardised. Constant channels map to 0.
pub fn rnorm(image: &mut Image) {
    if image.plane_len() == 0 {
        return;
    }
    standardize(image.channel_mut(0));
    for c in 1..image.channels {
        min_max(image.channel_mut(c));
    }
}

fn apply(step: &AugmentStep, sample: &mut ImageSample, rng: &mut impl Rng) {
    match *step {
        AugmentStep::Hflip { p } => {
            if rng.gen_bool(p) {
                hflip_image(&mut sample.image);
                hflip_mask(&mut sample.mask);
            }
        }
        AugmentStep::Vflip { p } => {
            if rng.gen_bool(p) {
                vflip_image(&mut sample.image);
                vflip_mask(&mut sample.mask);
            }
        }
        AugmentStep::Rnorm => rnorm(&mut sample.image),
    }
}

/// Runs the full chain. Masks only ever see geometric steps, so they stay binary.
pub fn augment(mut sample: ImageSample, chain: &[AugmentStep], rng: &mut impl Rng) -> ImageSample {
    for step in chain {
        apply(step, &mut sample, rng);
    }
    sample
}

/// Runs only the deterministic steps of the chain (evaluation-time preprocessing).
pub fn preprocess(mut sample: ImageSample, chain: &[AugmentStep]) -> ImageSample {
    for step in chain.iter().filter(|s| !s.is_random()) {
        if let AugmentStep::Rnorm = step {
            rnorm(&mut sample.image);
        }
    }
    sample
}
