//! Data ingest: raw slides and lesion photographs to fixed-size training samples.
//!
//! Histopathology slides arrive as 8-page TIFF stacks; only the nuclear stain
//! (first page) is used and the slide is tiled into non-overlapping squares.
//! Lesion photographs are resampled to a fixed resolution instead.

mod augment;
mod grid;
pub mod io;
mod resize;
mod split;
pub mod synthetic;
mod tiling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, preprocess, rnorm, AugmentStep};
pub use grid::{Image, Mask, Plane};
pub use resize::{resize_bilinear, resize_lesion_image, resize_nearest, LESION_INTERMEDIATE, LESION_SIZE};
pub use split::{apply_fixed_split, split_dataset, SplitCounts, SplitRatios, ISIC2017_SPLIT};
pub use tiling::{reassemble_tiles, tile_image, TileGrid};

/// Number of pages in the multiplexed histopathology TIFF stacks.
pub const SLIDE_PAGES: usize = 8;

/// Tile edge used for whole-slide images.
pub const WSI_TILE_SIZE: usize = 480;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Dermatomyositis,
    Dermofit,
    Isic2017,
    Synthetic,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Dermatomyositis,
        DatasetKind::Dermofit,
        DatasetKind::Isic2017,
        DatasetKind::Synthetic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Dermatomyositis => "dermatomyositis",
            DatasetKind::Dermofit => "dermofit",
            DatasetKind::Isic2017 => "isic2017",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown dataset `{s}`, expected one of dermatomyositis, dermofit, isic2017, synthetic"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split `{other}`, expected train, val or test"
            ))),
        }
    }
}

/// Where a sample came from. `tile` is `None` for whole (resized) images.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    pub dataset: DatasetKind,
    pub source_id: String,
    pub tile: Option<(usize, usize)>,
}

impl Origin {
    pub fn whole(dataset: DatasetKind, source_id: impl Into<String>) -> Self {
        Self {
            dataset,
            source_id: source_id.into(),
            tile: None,
        }
    }

    /// Cache file stem: `{source_id}_r{row}_c{col}` for tiles, `{source_id}` otherwise.
    pub fn file_stem(&self) -> String {
        match self.tile {
            Some((r, c)) => format!("{}_r{r}_c{c}", self.source_id),
            None => self.source_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub mask: Mask,
    pub origin: Origin,
    pub split: Option<Split>,
}

impl ImageSample {
    pub fn new(image: Image, mask: Mask, origin: Origin) -> Result<Self> {
        if image.height != mask.height || image.width != mask.width {
            return Err(Error::Shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(Self {
            image,
            mask,
            origin,
            split: None,
        })
    }
}

/// A raw multi-channel acquisition before channel selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSlide {
    pub channels: Vec<Plane>,
    pub height: usize,
    pub width: usize,
    pub source_id: String,
}

impl RawSlide {
    pub fn new(channels: Vec<Plane>, source_id: impl Into<String>) -> Result<Self> {
        if !matches!(channels.len(), 1 | 3 | SLIDE_PAGES) {
            return Err(Error::Format(format!(
                "slide has {} channels, expected 1, 3 or {SLIDE_PAGES}",
                channels.len()
            )));
        }
        let (height, width) = (channels[0].height, channels[0].width);
        if channels
            .iter()
            .any(|c| c.height != height || c.width != width)
        {
            return Err(Error::Shape("slide channels differ in size".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            source_id: source_id.into(),
        })
    }
}

/// Returns the nuclear-stain (DAPI) page of an 8-page slide, untouched.
pub fn extract_dapi_channel(slide: &RawSlide) -> Result<Plane> {
    if slide.channels.len() != SLIDE_PAGES {
        return Err(Error::Format(format!(
            "expected a {SLIDE_PAGES}-channel slide, got {} channels",
            slide.channels.len()
        )));
    }
    Ok(slide.channels[0].clone())
}
