//! Cross-entropy class weights from pixel statistics.
//!
//! Index 0 is background, index 1 is foreground throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Mask;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 2] = ["background", "foreground"];

/// Floor applied to zero counts when explicitly allowed.
pub const ZERO_CLASS_FLOOR: f64 = 1e-8;

/// Pixel tallies over a set of binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Pixels of each class.
    pub pixels_per_class: [u64; 2],
    pub total_pixels: u64,
    /// Total pixels of all images in which the class appears at least once.
    pub presence_total_per_class: [u64; 2],
    pub image_count: usize,
}

impl DatasetStats {
    /// Multiplies every count by `k`, as if each image were repeated `k` times.
    pub fn scaled(&self, k: u64) -> Self {
        Self {
            pixels_per_class: self.pixels_per_class.map(|v| v * k),
            total_pixels: self.total_pixels * k,
            presence_total_per_class: self.presence_total_per_class.map(|v| v * k),
            image_count: self.image_count * k as usize,
        }
    }

    /// The same statistics with the class labels exchanged.
    pub fn swapped(&self) -> Self {
        let [a, b] = self.pixels_per_class;
        let [pa, pb] = self.presence_total_per_class;
        Self {
            pixels_per_class: [b, a],
            presence_total_per_class: [pb, pa],
            ..*self
        }
    }
}

pub fn compute_pixel_stats<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<DatasetStats> {
    let mut stats = DatasetStats {
        pixels_per_class: [0; 2],
        total_pixels: 0,
        presence_total_per_class: [0; 2],
        image_count: 0,
    };
    for mask in masks {
        let n = mask.len() as u64;
        let fg = mask.foreground_count() as u64;
        let bg = n - fg;
        stats.pixels_per_class[0] += bg;
        stats.pixels_per_class[1] += fg;
        stats.total_pixels += n;
        if bg > 0 {
            stats.presence_total_per_class[0] += n;
        }
        if fg > 0 {
            stats.presence_total_per_class[1] += n;
        }
        stats.image_count += 1;
    }
    if stats.image_count == 0 {
        return Err(Error::InvalidInput("no masks to count".into()));
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Each class weighted by its own pixel fraction.
    Distribution,
    /// Each class weighted by the other class's pixel fraction.
    Cdw,
    MedianFrequency,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [
        WeightScheme::Distribution,
        WeightScheme::Cdw,
        WeightScheme::MedianFrequency,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            WeightScheme::Distribution => "distribution",
            WeightScheme::Cdw => "cdw",
            WeightScheme::MedianFrequency => "median_frequency",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown weight scheme `{s}`, expected one of distribution, cdw, median_frequency"
                ))
            })
    }
}

/// Cross-entropy weights in (background, foreground) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub background: f64,
    pub foreground: f64,
    pub scheme: WeightScheme,
}

impl WeightPair {
    pub fn new(background: f64, foreground: f64, scheme: WeightScheme) -> Result<Self> {
        if !(background > 0.0 && foreground > 0.0 && background.is_finite() && foreground.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "class weights must be positive and finite, got ({background}, {foreground})"
            )));
        }
        Ok(Self {
            background,
            foreground,
            scheme,
        })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.background, self.foreground]
    }
}

/// Presence-normalised class frequencies and their median.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassFrequency {
    pub n: [f64; 2],
    pub med_freq: f64,
}

fn class_counts(stats: &DatasetStats, floor: bool) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for (c, slot) in out.iter_mut().enumerate() {
        let v = stats.pixels_per_class[c] as f64;
        *slot = if v > 0.0 {
            v
        } else if floor {
            ZERO_CLASS_FLOOR
        } else {
            return Err(Error::EmptyClass(CLASS_NAMES[c]));
        };
    }
    Ok(out)
}

fn fractions(stats: &DatasetStats, floor: bool) -> Result<[f64; 2]> {
    let [bg, fg] = class_counts(stats, floor)?;
    let total = bg + fg;
    Ok([bg / total, fg / total])
}

pub fn class_frequency(stats: &DatasetStats, floor: bool) -> Result<ClassFrequency> {
    let alpha = class_counts(stats, floor)?;
    let mut n = [0.0; 2];
    for c in 0..2 {
        let beta = stats.presence_total_per_class[c] as f64;
        let beta = if beta > 0.0 {
            beta
        } else if floor {
            alpha[c]
        } else {
            return Err(Error::EmptyClass(CLASS_NAMES[c]));
        };
        n[c] = alpha[c] / beta;
    }
    // The median of two values is their mean.
    let med_freq = (n[0] + n[1]) / 2.0;
    Ok(ClassFrequency { n, med_freq })
}

pub fn distribution_weights(stats: &DatasetStats) -> Result<WeightPair> {
    compute_weights(stats, WeightScheme::Distribution, false)
}

pub fn cdw_weights(stats: &DatasetStats) -> Result<WeightPair> {
    compute_weights(stats, WeightScheme::Cdw, false)
}

pub fn median_frequency_weights(stats: &DatasetStats) -> Result<WeightPair> {
    compute_weights(stats, WeightScheme::MedianFrequency, false)
}

/// Weights under `scheme`. With `floor`, an absent class counts as
/// [`ZERO_CLASS_FLOOR`] pixels instead of being an error.
pub fn compute_weights(stats: &DatasetStats, scheme: WeightScheme, floor: bool) -> Result<WeightPair> {
    let (bg, fg) = match scheme {
        WeightScheme::Distribution => {
            let [bg, fg] = fractions(stats, floor)?;
            (bg, fg)
        }
        WeightScheme::Cdw => {
            let [bg, fg] = fractions(stats, floor)?;
            (fg, bg)
        }
        WeightScheme::MedianFrequency => {
            let f = class_frequency(stats, floor)?;
            (f.med_freq / f.n[0], f.med_freq / f.n[1])
        }
    };
    WeightPair::new(bg, fg, scheme)
}
