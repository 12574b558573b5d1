//! Experiment configuration and orchestration: data preparation, class
//! weights, the (architecture x encoder x scheme x APP variant) grid of seed
//! sweeps, and the reports built from `results.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::app::{AppConfig, AppVariant};
use crate::dataset::io::{
    cache_sample, load_cached, load_image, load_mask, load_tiff_slide, read_manifest, read_split_manifest,
    write_split_manifest, SplitRecord,
};
use crate::dataset::synthetic::{generate_blobs, BlobSpec};
use crate::dataset::{
    apply_fixed_split, extract_dapi_channel, resize_lesion_image, split_dataset, tile_image, AugmentStep,
    DatasetKind, Image, ImageSample, Origin, Split, SplitRatios, ISIC2017_SPLIT, WSI_TILE_SIZE,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, append_result, emit_table, plot_bars, read_results, render_grid, write_summary, EmptyIou, IouAggregate, IouClasses,
    GroupKey, MetricReport, ResultRow, TableLayout,
};
use crate::models::{Architecture, EncoderKind, SegModelConfig, ENCODER_DEPTH};
use crate::train::{run_config_hash, stable_hash, train_run, RunContext, SplitData, TrainConfig};
use crate::weights::{compute_pixel_stats, compute_weights, WeightPair, WeightScheme};

/// Fallback prefix for relative data paths when `data.root` is unset.
pub const DATA_ROOT_ENV: &str = "SEGLAB_DATA_ROOT";

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub app: AppSection,
    #[serde(default)]
    pub weights: WeightsSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Seeded shuffle over source ids.
    Random,
    /// Manifest split tags, or the official ISIC-2017 counts in manifest order.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Prefix for relative paths; falls back to `$SEGLAB_DATA_ROOT`, then `.`.
    pub root: Option<PathBuf>,
    /// CSV with columns `image,mask,dataset[,split]`. Not used for synthetic data.
    pub manifest: Option<PathBuf>,
    /// Where `prepare` writes PNG pairs; defaults to `{output_dir}/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Defaults to `fixed` for isic2017 and `random` otherwise.
    pub split: Option<SplitMode>,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub split_seed: u64,
    pub synthetic: SyntheticSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            manifest: None,
            cache_dir: None,
            split: None,
            val_ratio: 0.10,
            test_ratio: 0.20,
            split_seed: 0,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let b = BlobSpec::default();
        Self {
            count: b.count,
            size: b.size,
            channels: b.channels,
            min_blobs: b.blobs.0,
            max_blobs: b.blobs.1,
            noise: b.noise,
            seed: 0,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self) -> BlobSpec {
        BlobSpec {
            count: self.count,
            size: self.size,
            channels: self.channels,
            blobs: (self.min_blobs, self.max_blobs),
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub architecture: Vec<Architecture>,
    pub encoder: Vec<EncoderKind>,
    pub weight_scheme: Vec<WeightScheme>,
    pub app_variant: Vec<AppVariant>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            architecture: vec![Architecture::Unet],
            encoder: vec![EncoderKind::Resnet18],
            weight_scheme: vec![WeightScheme::Cdw],
            app_variant: AppVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub threshold: f64,
    pub empty_iou: EmptyIou,
    pub iou_classes: IouClasses,
    pub iou_aggregate: IouAggregate,
    pub checkpoint_every: usize,
    /// Steps such as `hflip:0.5`, `vflip:0.5`, `rnorm`.
    pub augment: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            t_max: t.t_max,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seeds: t.seeds,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            threshold: t.threshold,
            empty_iou: t.empty_iou,
            iou_classes: t.iou_classes,
            iou_aggregate: t.iou_aggregate,
            checkpoint_every: t.checkpoint_every,
            augment: t.augment.iter().map(AugmentStep::name).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to 1 for dermatomyositis (DAPI only) and 3 otherwise.
    pub in_channels: Option<usize>,
    /// Defaults depend on the encoder.
    pub decoder_channels: Option<Vec<usize>>,
    pub se_reduction: Option<usize>,
    /// Encoder weights in safetensors format, applied to every resnet cell.
    pub pretrained_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppSection {
    /// Shorthand for a one-variant `grid.app_variant`.
    pub variant: Option<AppVariant>,
    pub dims: Vec<usize>,
    pub lambda_mse: f64,
}

impl Default for AppSection {
    fn default() -> Self {
        let a = AppConfig::default();
        Self {
            variant: None,
            dims: a.dims,
            lambda_mse: a.lambda_mse,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    /// Replace a zero-pixel class by a tiny floor instead of failing.
    pub floor: bool,
    /// Frozen `[background, foreground]` pairs keyed by scheme; missing
    /// schemes are computed from the training split.
    pub values: BTreeMap<String, [f64; 2]>,
}

fn toml_error(e: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let key = e.path().to_string();
    let message = e.inner().message().trim().to_string();
    Error::config(if key == "." { "<root>".to_string() } else { key }, message)
}

/// Parses and validates a TOML experiment config. Unknown keys, type
/// mismatches and missing required keys are reported with their key path.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(toml_error)?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    /// A config with every default and the given dataset.
    pub fn new(dataset: DatasetKind) -> Self {
        Self {
            dataset,
            output_dir: default_output_dir(),
            data: DataSection::default(),
            grid: GridSection::default(),
            train: TrainSection::default(),
            model: ModelSection::default(),
            app: AppSection::default(),
            weights: WeightsSection::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Stable under key order and comments; any semantic change alters it.
    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.data_root().join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.data.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn split_mode(&self) -> SplitMode {
        self.data.split.unwrap_or(match self.dataset {
            DatasetKind::Isic2017 => SplitMode::Fixed,
            _ => SplitMode::Random,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.model.in_channels.unwrap_or(match self.dataset {
            DatasetKind::Dermatomyositis => 1,
            DatasetKind::Synthetic => self.data.synthetic.channels,
            _ => 3,
        })
    }

    pub fn augment_chain(&self) -> Result<Vec<AugmentStep>> {
        self.train
            .augment
            .iter()
            .enumerate()
            .map(|(i, s)| {
                AugmentStep::parse(s).ok_or_else(|| {
                    Error::config(
                        format!("train.augment[{i}]"),
                        format!("unknown step `{s}`, expected hflip[:p], vflip[:p] or rnorm"),
                    )
                })
            })
            .collect()
    }

    pub fn app_variants(&self) -> Vec<AppVariant> {
        match self.app.variant {
            Some(v) => vec![v],
            None => self.grid.app_variant.clone(),
        }
    }

    /// Grid cells in (architecture, encoder, scheme, variant) order.
    pub fn cells(&self) -> Vec<GroupKey> {
        let g = &self.grid;
        let variants = self.app_variants();
        let mut out = Vec::new();
        for &architecture in &g.architecture {
            for &encoder in &g.encoder {
                for &weight_scheme in &g.weight_scheme {
                    for &app_variant in &variants {
                        out.push(GroupKey {
                            dataset: self.dataset,
                            architecture,
                            encoder,
                            weight_scheme,
                            app_variant,
                        });
                    }
                }
            }
        }
        out
    }

    /// The full training configuration of one grid cell.
    pub fn cell_config(&self, cell: &GroupKey) -> Result<TrainConfig> {
        let t = &self.train;
        let mut model = SegModelConfig::new(cell.architecture, cell.encoder, self.in_channels());
        if let Some(d) = &self.model.decoder_channels {
            model.decoder_channels = d.clone();
        }
        if let Some(r) = self.model.se_reduction {
            model.se_reduction = r;
        }
        if cell.encoder != EncoderKind::Tiny {
            model.pretrained_weights = self.model.pretrained_weights.as_deref().map(|p| self.resolve(p));
        }
        Ok(TrainConfig {
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            t_max: t.t_max,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seeds: t.seeds.clone(),
            weight_scheme: cell.weight_scheme,
            app: AppConfig {
                variant: cell.app_variant,
                dims: self.app.dims.clone(),
                lambda_mse: self.app.lambda_mse,
            },
            model,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            threshold: t.threshold,
            empty_iou: t.empty_iou,
            iou_classes: t.iou_classes,
            iou_aggregate: t.iou_aggregate,
            checkpoint_every: t.checkpoint_every,
            augment: self.augment_chain()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        for (key, empty) in [
            ("grid.architecture", g.architecture.is_empty()),
            ("grid.encoder", g.encoder.is_empty()),
            ("grid.weight_scheme", g.weight_scheme.is_empty()),
            ("grid.app_variant", g.app_variant.is_empty()),
        ] {
            if empty {
                return Err(Error::config(key, "list must not be empty"));
            }
        }
        if self.app.variant.is_some() && g.app_variant != GridSection::default().app_variant {
            return Err(Error::config("app.variant", "set either app.variant or grid.app_variant, not both"));
        }
        let mut seen = BTreeSet::new();
        for &s in &self.train.seeds {
            if !seen.insert(s) {
                return Err(Error::config("train.seeds", format!("seed {s} is listed twice")));
            }
        }
        SplitRatios {
            train: 1.0 - self.data.val_ratio - self.data.test_ratio,
            val: self.data.val_ratio,
            test: self.data.test_ratio,
        }
        .validate()
        .map_err(|e| Error::config("data.val_ratio", e.to_string()))?;
        for cell in self.cells() {
            self.cell_config(&cell)?.validate()?;
        }
        for (name, pair) in &self.weights.values {
            let scheme: WeightScheme = name
                .parse()
                .map_err(|e: Error| Error::config(format!("weights.values.{name}"), e.to_string()))?;
            WeightPair::new(pair[0], pair[1], scheme)
                .map_err(|e| Error::config(format!("weights.values.{name}"), e.to_string()))?;
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                let s = &self.data.synthetic;
                let step = 1 << ENCODER_DEPTH;
                if s.size == 0 || s.size % step != 0 {
                    return Err(Error::config(
                        "data.synthetic.size",
                        format!("must be a positive multiple of {step}, got {}", s.size),
                    ));
                }
                if s.count < 3 {
                    return Err(Error::config("data.synthetic.count", "need at least 3 images"));
                }
                if !matches!(s.channels, 1 | 3) {
                    return Err(Error::config("data.synthetic.channels", "expected 1 or 3"));
                }
                if s.min_blobs > s.max_blobs {
                    return Err(Error::config("data.synthetic.min_blobs", "exceeds max_blobs"));
                }
            }
            _ if self.data.manifest.is_none() => {
                return Err(Error::config(
                    "data.manifest",
                    format!("required for dataset `{}`", self.dataset),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: 1.0 - self.data.val_ratio - self.data.test_ratio,
            val: self.data.val_ratio,
            test: self.data.test_ratio,
        }
    }

    /// Frozen pair for `scheme`, if the config carries one.
    pub fn frozen_weights(&self, scheme: WeightScheme) -> Option<WeightPair> {
        self.weights
            .values
            .get(scheme.as_str())
            .and_then(|p| WeightPair::new(p[0], p[1], scheme).ok())
    }
}

fn image_of(slide_plane: crate::dataset::Plane) -> Result<Image> {
    Image::from_planes(&[slide_plane])
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("sample").to_string()
}

/// Loads every manifest record at training resolution (tiles for slides,
/// resized whole images for lesions), with manifest split tags attached.
pub fn ingest(config: &ExperimentConfig) -> Result<Vec<ImageSample>> {
    if config.dataset == DatasetKind::Synthetic {
        return Ok(generate_blobs(&config.data.synthetic.spec(), config.data.synthetic.seed));
    }
    let manifest = config.resolve(config.data.manifest.as_deref().expect("validated"));
    let records = read_manifest(&manifest, &config.data_root())?;
    let mut samples = Vec::new();
    for rec in records {
        if rec.dataset != config.dataset {
            return Err(Error::InvalidInput(format!(
                "{}: record `{}` is tagged {}, config dataset is {}",
                manifest.display(),
                rec.image.display(),
                rec.dataset,
                config.dataset
            )));
        }
        let id = file_stem(&rec.image);
        let mask = load_mask(&rec.mask)?;
        let mut produced = match rec.dataset {
            DatasetKind::Dermatomyositis => {
                let slide = load_tiff_slide(&rec.image, &id)?;
                let image = image_of(extract_dapi_channel(&slide)?)?;
                tile_image(&image, &mask, WSI_TILE_SIZE, rec.dataset, &id)?.0
            }
            _ => {
                let image = load_image(&rec.image)?;
                vec![resize_lesion_image(&image, &mask, Origin::whole(rec.dataset, id))?]
            }
        };
        for s in &mut produced {
            s.split = rec.split;
        }
        samples.extend(produced);
    }
    Ok(samples)
}

/// Assigns splits per the configured mode.
pub fn assign_splits(config: &ExperimentConfig, samples: &mut [ImageSample]) -> Result<()> {
    match config.split_mode() {
        SplitMode::Random => {
            split_dataset(samples, config.ratios(), config.data.split_seed)?;
        }
        SplitMode::Fixed => {
            let all_tagged = samples.iter().all(|s| s.split.is_some());
            if !all_tagged && config.dataset != DatasetKind::Isic2017 {
                return Err(Error::config(
                    "data.split",
                    "fixed split needs a split tag on every manifest record",
                ));
            }
            apply_fixed_split(samples, ISIC2017_SPLIT)?;
        }
    }
    Ok(())
}

fn partition(samples: Vec<ImageSample>) -> SplitData {
    let mut data = SplitData::default();
    for s in samples {
        match s.split {
            Some(Split::Val) => data.val.push(s),
            Some(Split::Test) => data.test.push(s),
            _ => data.train.push(s),
        }
    }
    data
}

/// Ingests, splits and caches the dataset; writes the split manifest.
pub fn prepare(config: &ExperimentConfig) -> Result<Vec<SplitRecord>> {
    let mut samples = ingest(config)?;
    assign_splits(config, &mut samples)?;
    let dir = config.cache_dir();
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        records.push(SplitRecord {
            path: cache_sample(&dir, s)?,
            split: s.split.expect("assigned above"),
            dataset: config.dataset,
        });
    }
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_split_manifest(&config.output_dir.join(SPLITS_FILE), &records)?;
    log::info!("prepared {} samples into {}", records.len(), dir.display());
    Ok(records)
}

/// Train/val/test samples. Synthetic data is regenerated in memory; other
/// datasets come from the split manifest, which is prepared on first use.
pub fn load_data(config: &ExperimentConfig) -> Result<SplitData> {
    if config.dataset == DatasetKind::Synthetic {
        let mut samples = ingest(config)?;
        assign_splits(config, &mut samples)?;
        return Ok(partition(samples));
    }
    let manifest = config.output_dir.join(SPLITS_FILE);
    let records = if manifest.exists() {
        read_split_manifest(&manifest)?
    } else {
        prepare(config)?
    };
    let samples = records.iter().map(load_cached).collect::<Result<Vec<_>>>()?;
    Ok(partition(samples))
}

/// Pairs for every scheme, from training-split masks only.
pub fn training_weights(config: &ExperimentConfig, data: &SplitData) -> Result<Vec<WeightPair>> {
    let stats = compute_pixel_stats(data.train.iter().map(|s| &s.mask))?;
    WeightScheme::ALL
        .iter()
        .map(|&s| compute_weights(&stats, s, config.weights.floor))
        .collect()
}

/// `scheme,w_background,w_foreground` lines.
pub fn weights_table(pairs: &[WeightPair]) -> String {
    let mut out = String::from("scheme,w_background,w_foreground\n");
    for p in pairs {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.scheme, p.background, p.foreground));
    }
    out
}

/// Writes `weights.values.<scheme> = [bg, fg]` into a config file in place,
/// keeping its comments and layout.
pub fn write_weights_into_config(path: &Path, pairs: &[WeightPair]) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: toml_edit::DocumentMut = text
        .parse()
        .map_err(|e: toml_edit::TomlError| Error::config("<root>", e.to_string()))?;
    let weights = doc
        .entry("weights")
        .or_insert_with(|| toml_edit::Item::Table(toml_edit::Table::new()))
        .as_table_like_mut()
        .ok_or_else(|| Error::config("weights", "expected a table"))?;
    let values = weights
        .entry("values")
        .or_insert(toml_edit::Item::Table(toml_edit::Table::new()))
        .as_table_like_mut()
        .ok_or_else(|| Error::config("weights.values", "expected a table"))?;
    for p in pairs {
        let mut arr = toml_edit::Array::new();
        arr.push(p.background);
        arr.push(p.foreground);
        values.insert(p.scheme.as_str(), toml_edit::value(arr));
    }
    std::fs::write(path, doc.to_string()).map_err(|e| Error::io(path, e))
}

fn cell_weights(config: &ExperimentConfig, computed: &[WeightPair], scheme: WeightScheme) -> WeightPair {
    config.frozen_weights(scheme).unwrap_or_else(|| {
        *computed
            .iter()
            .find(|p| p.scheme == scheme)
            .expect("every scheme is computed")
    })
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest<'a> {
    config_hash: String,
    code_version: &'a str,
    dataset: DatasetKind,
    grid_cells: usize,
    seeds: &'a [u64],
}

/// Counts from one pass over the grid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridOutcome {
    pub runs_total: usize,
    pub runs_skipped: usize,
    pub runs_succeeded: usize,
    pub runs_failed: usize,
    pub failures: Vec<String>,
}

impl GridOutcome {
    /// 0 on success, 2 if nothing succeeded, 3 for a partial grid.
    pub fn exit_code(&self) -> i32 {
        if self.runs_failed == 0 {
            0
        } else if self.runs_succeeded + self.runs_skipped == 0 {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Grid runs executed concurrently.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

fn run_id(cell: &GroupKey, seed: u64) -> String {
    format!(
        "{}_{}_{}_{}_{}_seed{seed}",
        cell.dataset, cell.architecture, cell.encoder, cell.weight_scheme, cell.app_variant
    )
}

fn write_run_manifest(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&resolved, config.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    let manifest = RunManifest {
        config_hash: config.hash(),
        code_version: env!("CARGO_PKG_VERSION"),
        dataset: config.dataset,
        grid_cells: config.cells().len(),
        seeds: &config.train.seeds,
    };
    let path = dir.join(RUN_MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Trains every (cell, seed) pair not already in `results.csv`, appending a
/// row as each run finishes.
pub fn run_grid(config: &ExperimentConfig, data: &SplitData, opts: RunOptions) -> Result<GridOutcome> {
    config.validate()?;
    write_run_manifest(config)?;
    let results_path = config.output_dir.join(RESULTS_FILE);
    let done: BTreeSet<(GroupKey, u64)> = read_results(&results_path)?
        .iter()
        .map(|r| (r.key(), r.seed))
        .collect();
    let computed = training_weights(config, data)?;
    for p in &computed {
        log::info!("{} weights: background {:.4}, foreground {:.4}", p.scheme, p.background, p.foreground);
    }

    let mut outcome = GridOutcome::default();
    let mut work = Vec::new();
    for cell in config.cells() {
        let train_cfg = config.cell_config(&cell)?;
        let weights = cell_weights(config, &computed, cell.weight_scheme);
        for &seed in &config.train.seeds {
            outcome.runs_total += 1;
            if done.contains(&(cell, seed)) {
                outcome.runs_skipped += 1;
            } else {
                work.push((cell, train_cfg.clone(), weights, seed));
            }
        }
    }
    if outcome.runs_skipped > 0 {
        log::info!("resuming: {} of {} runs already recorded", outcome.runs_skipped, outcome.runs_total);
    }

    let run_dir = config.output_dir.join("runs");
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let next = AtomicUsize::new(0);
    let state = Mutex::new(outcome);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((cell, cfg, weights, seed)) = work.get(i) else {
            break;
        };
        let id = run_id(cell, *seed);
        let ctx = RunContext {
            dir: Some(run_dir.clone()),
            run_id: id.clone(),
            config_hash: stable_hash(&(run_config_hash(cfg), weights)),
        };
        log::info!("[{}/{}] {id}", i + 1, work.len());
        let result = train_run(cfg, data, weights, *seed, &ctx).and_then(|r| {
            let row = ResultRow {
                dataset: cell.dataset,
                architecture: cell.architecture,
                encoder: cell.encoder,
                weight_scheme: cell.weight_scheme,
                app_variant: cell.app_variant,
                seed: *seed,
                test_iou: r.test_iou,
                test_pixel_accuracy: r.test_pixel_accuracy,
            };
            let mut st = state.lock().expect("no panics while holding the lock");
            append_result(&results_path, &row)?;
            st.runs_succeeded += 1;
            Ok(r)
        });
        match result {
            Ok(r) => log::info!("{id}: test IoU {:.4}", r.test_iou),
            Err(e) => {
                log::error!("{id}: {e}");
                let mut st = state.lock().expect("no panics while holding the lock");
                st.runs_failed += 1;
                st.failures.push(format!("{id}: {e}"));
            }
        }
    };
    let jobs = opts.jobs.clamp(1, work.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..jobs {
            s.spawn(worker);
        }
        worker();
    });
    Ok(state.into_inner().expect("workers joined"))
}

/// Regenerates `summary.csv`, both table layouts (delimited and grid) and
/// one bar plot per (dataset, architecture, scheme) from `results.csv`.
pub fn write_reports(output_dir: &Path) -> Result<Vec<MetricReport>> {
    let rows = read_results(&output_dir.join(RESULTS_FILE))?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no results to report",
            output_dir.join(RESULTS_FILE).display()
        )));
    }
    let reports = aggregate(&rows);
    write_summary(&output_dir.join(SUMMARY_FILE), &reports)?;
    for (layout, stem) in [
        (TableLayout::ByEncoder, "table_by_encoder"),
        (TableLayout::ByScheme, "table_by_scheme"),
    ] {
        let delimited = output_dir.join(format!("{stem}.csv"));
        std::fs::write(&delimited, emit_table(&reports, layout)?).map_err(|e| Error::io(&delimited, e))?;
        let grid = output_dir.join(format!("{stem}.txt"));
        std::fs::write(&grid, render_grid(&reports, layout)).map_err(|e| Error::io(&grid, e))?;
    }
    let mut groups: BTreeMap<(DatasetKind, Architecture, WeightScheme), Vec<MetricReport>> = BTreeMap::new();
    for r in &reports {
        groups
            .entry((r.key.dataset, r.key.architecture, r.key.weight_scheme))
            .or_default()
            .push(r.clone());
    }
    for ((dataset, arch, scheme), group) in groups {
        plot_bars(&output_dir.join(format!("iou_{dataset}_{arch}_{scheme}.png")), &group)?;
    }
    Ok(reports)
}

/// Full pipeline: ingest, weights, grid, reports. Completed runs are skipped,
/// so a rerun only regenerates the reports.
pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<GridOutcome> {
    config.validate()?;
    log::info!("config {}:\n{}", config.hash(), config.to_toml());
    let data = load_data(config)?;
    log::info!(
        "{} train / {} val / {} test samples",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let outcome = run_grid(config, &data, opts)?;
    if outcome.runs_succeeded + outcome.runs_skipped > 0 {
        write_reports(&config.output_dir)?;
    }
    Ok(outcome)
}
