//! File formats: TIFF stacks, PNG/JPEG photographs, binary mask PNGs, the
//! input manifest and the split manifest.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};

use super::grid::{Image, Mask, Plane};
use super::{DatasetKind, ImageSample, RawSlide, Split};
use crate::error::{Error, Result};

/// Reads every page of a (multi-page) grayscale TIFF, scaling by the dtype maximum.
pub fn load_tiff_slide(path: &Path, source_id: &str) -> Result<RawSlide> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))?;
    let mut pages = Vec::new();
    loop {
        let (width, height) = decoder.dimensions()?;
        let (w, h) = (width as usize, height as usize);
        let data: Vec<f32> = match decoder.read_image()? {
            DecodingResult::U8(v) => v.into_iter().map(|x| x as f32 / 255.0).collect(),
            DecodingResult::U16(v) => v.into_iter().map(|x| x as f32 / 65535.0).collect(),
            DecodingResult::F32(v) => v,
            other => {
                return Err(Error::Format(format!(
                    "{}: unsupported TIFF sample type {}",
                    path.display(),
                    sample_type_name(&other)
                )))
            }
        };
        if data.len() != w * h {
            return Err(Error::Format(format!(
                "{}: page {} is not single-channel",
                path.display(),
                pages.len()
            )));
        }
        pages.push(Plane::new(h, w, data)?);
        if !decoder.more_images() {
            break;
        }
        decoder.next_image()?;
    }
    RawSlide::new(pages, source_id)
}

fn sample_type_name(r: &DecodingResult) -> &'static str {
    match r {
        DecodingResult::U8(_) => "u8",
        DecodingResult::U16(_) => "u16",
        DecodingResult::U32(_) => "u32",
        DecodingResult::U64(_) => "u64",
        DecodingResult::F32(_) => "f32",
        DecodingResult::F64(_) => "f64",
        DecodingResult::I8(_) => "i8",
        DecodingResult::I16(_) => "i16",
        DecodingResult::I32(_) => "i32",
        DecodingResult::I64(_) => "i64",
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(image::open(path)?)
}

/// Loads a PNG/JPEG as a 1- or 3-channel image in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_)
    );
    let channels = if gray { 1 } else { 3 };
    let interleaved: Vec<f32> = match (gray, sixteen) {
        (true, false) => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (true, true) => img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        (false, false) => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (false, true) => img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    };
    let mut data = vec![0.0; channels * h * w];
    for (i, v) in interleaved.into_iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * h * w + pixel] = v;
    }
    Image::new(channels, h, w, data)
}

/// Loads a 0/255 mask PNG. Pixels at or above 128 are foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect())
}

fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a 1- or 3-channel image as a 16-bit PNG.
pub fn save_image_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height as u32, image.width as u32);
    match image.channels {
        1 => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w, h, image.data.iter().map(|&v| quantize(v)).collect())
                    .expect("buffer sized from image dims");
            buf.save(path)?;
        }
        3 => {
            let plane = image.plane_len();
            let raw = (0..plane)
                .flat_map(|p| (0..3).map(move |c| quantize(image.data[c * plane + p])))
                .collect();
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w, h, raw).expect("buffer sized from image dims");
            buf.save(path)?;
        }
        c => {
            return Err(Error::Format(format!(
                "cannot write a {c}-channel image as PNG"
            )))
        }
    }
    Ok(())
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer sized from mask dims");
    buf.save(path)?;
    Ok(())
}

/// Cache locations of one sample: `images/{stem}.png` and `masks/{stem}.png`.
pub fn cache_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{stem}.png")),
        dir.join("masks").join(format!("{stem}.png")),
    )
}

/// Writes the image/mask pair and returns the image path.
pub fn cache_sample(dir: &Path, sample: &ImageSample) -> Result<PathBuf> {
    let (img_path, mask_path) = cache_paths(dir, &sample.origin.file_stem());
    for p in [&img_path, &mask_path] {
        let parent = p.parent().expect("joined path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_image_png(&img_path, &sample.image)?;
    save_mask_png(&mask_path, &sample.mask)?;
    Ok(img_path)
}

/// One input record: an image, its mask, the dataset and an optional fixed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub dataset: DatasetKind,
    #[serde(default)]
    pub split: Option<Split>,
}

/// Reads a CSV manifest with header `image,mask,dataset[,split]`. Relative
/// paths are resolved against `root`.
pub fn read_manifest(path: &Path, root: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let mut rec: ManifestRecord = row?;
        if rec.image.is_relative() {
            rec.image = root.join(&rec.image);
        }
        if rec.mask.is_relative() {
            rec.mask = root.join(&rec.mask);
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("{}: manifest is empty", path.display())));
    }
    Ok(out)
}

/// A row of the split manifest written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub path: PathBuf,
    pub split: Split,
    pub dataset: DatasetKind,
}

pub fn write_split_manifest(path: &Path, records: &[SplitRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<SplitRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Mask path paired with a cached image path.
pub fn mask_path_for(image_path: &Path) -> PathBuf {
    let name = image_path.file_name().unwrap_or_default();
    image_path
        .parent()
        .and_then(Path::parent)
        .map(|root| root.join("masks").join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

/// Loads one cached sample back from its image path.
pub fn load_cached(record: &SplitRecord) -> Result<ImageSample> {
    let image = load_image(&record.path)?;
    let mask = load_mask(&mask_path_for(&record.path))?;
    let stem = record
        .path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let mut sample = ImageSample::new(image, mask, super::Origin::whole(record.dataset, stem))?;
    sample.split = Some(record.split);
    Ok(sample)
}
