//! Training runs: schedule, epoch loop, evaluation, checkpoints and seed sweeps.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::app::{build_app, combined_loss, App, AppConfig, APP_PREFIX};
use crate::dataset::{augment, preprocess, AugmentStep, ImageSample, Mask};
use crate::error::{Error, Result};
use crate::metrics::{dataset_scores, EmptyIou, IouAggregate, IouClasses, IouOptions};
use crate::models::{Architecture, EncoderKind, SegModelConfig, Segmenter};
use crate::nn::checkpoint::{load_tensors, save_tensors};
use crate::nn::{Adam, AdamConfig, Ctx, ParamStore, Tape, Tensor};
use crate::weights::{WeightPair, WeightScheme};

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = t_max`.
///
/// Both endpoints are returned exactly. Past `t_max` the rate stays at
/// `lr_min` and a warning is logged.
pub fn cosine_lr(t: f64, lr_max: f64, lr_min: f64, t_max: f64) -> f64 {
    if t <= 0.0 {
        return lr_max;
    }
    if t > t_max {
        log::warn!("scheduler step {t} is past t_max = {t_max}; holding lr at {lr_min:e}");
        return lr_min;
    }
    if t == t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / t_max).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub weight_scheme: WeightScheme,
    pub app: AppConfig,
    pub model: SegModelConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Foreground-probability threshold for predicted masks.
    pub threshold: f64,
    pub empty_iou: EmptyIou,
    pub iou_classes: IouClasses,
    pub iou_aggregate: IouAggregate,
    /// Write a resumable checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub augment: Vec<AugmentStep>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 3.6e-4,
            lr_min: 3.4e-4,
            weight_decay: 1e-5,
            t_max: 50,
            epochs: 50,
            batch_size: 16,
            seeds: vec![0, 1, 2, 3, 4],
            weight_scheme: WeightScheme::Cdw,
            app: AppConfig::default(),
            model: SegModelConfig::new(Architecture::Unet, EncoderKind::Resnet18, 3),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            threshold: 0.5,
            empty_iou: EmptyIou::One,
            iou_classes: IouClasses::Foreground,
            iou_aggregate: IouAggregate::PerImage,
            checkpoint_every: 0,
            augment: AugmentStep::default_chain(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("train.lr_min", format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay", "must be non-negative".into());
        }
        if self.t_max == 0 {
            return bad("train.t_max", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("train.seeds", "need at least one seed".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("train.threshold", format!("{} is outside (0, 1)", self.threshold));
        }
        if !(self.app.lambda_mse >= 0.0 && self.app.lambda_mse.is_finite()) {
            return bad("app.lambda_mse", "must be a non-negative number".into());
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// SHA-256 over the canonical (key-sorted) JSON form, as 16 hex digits.
pub fn stable_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serialises to JSON").to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
}

/// Hash of everything that determines a run except the seed list.
pub fn run_config_hash(config: &TrainConfig) -> String {
    let mut c = config.clone();
    c.seeds.clear();
    stable_hash(&c)
}

#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl SplitData {
    fn all(&self) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub test_iou: f64,
    pub test_pixel_accuracy: f64,
    pub best_val_iou: f64,
    pub epochs_completed: usize,
    pub config_hash: String,
}

fn stack_images(samples: &[&ImageSample]) -> Tensor<f32> {
    let first = &samples[0].image;
    let mut data = Vec::with_capacity(samples.len() * first.data.len());
    for s in samples {
        data.extend_from_slice(&s.image.data);
    }
    Tensor::new(vec![samples.len(), first.channels, first.height, first.width], data)
}

fn stack_masks(samples: &[&ImageSample]) -> Rc<[u8]> {
    samples.iter().flat_map(|s| s.mask.data.iter().copied()).collect()
}

/// A segmenter, its optional APP, and their optimiser state.
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    pub model: Segmenter,
    pub app: Option<App>,
    adam: Adam<f32>,
    weights: WeightPair,
    pub seed: u64,
}

impl Trainer {
    /// Builds a freshly initialised model for `height x width` inputs. All
    /// initial values derive from `seed`.
    pub fn new(config: &TrainConfig, weights: WeightPair, seed: u64, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Segmenter::build(&config.model, &mut store, &mut rng)?;
        let app = build_app(&config.app, height * width, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            model,
            app,
            adam: Adam::new(config.adam()),
            weights,
            seed,
        })
    }

    pub fn weights(&self) -> &WeightPair {
        &self.weights
    }

    /// One optimiser step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&ImageSample], lr: f64, epoch: usize, batch_index: usize) -> Result<f64> {
        let non_finite = || Error::NonFiniteLoss {
            epoch,
            batch: batch_index,
            lr,
        };
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store, true);
        let x = tape.constant(stack_images(batch));
        let logits = self.model.forward(&cx, x)?;
        if !tape.value(logits).is_finite() {
            return Err(non_finite());
        }
        let app_out = match &self.app {
            Some(app) => {
                let probs = tape.foreground_prob(logits);
                Some(app.forward(&cx, probs)?)
            }
            None => None,
        };
        let gt = stack_masks(batch);
        let loss = combined_loss(&tape, logits, app_out, &gt, &self.weights, self.config.app.lambda_mse)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(non_finite());
        }
        let grads = tape.backward(loss);
        let updates = tape.take_buffer_updates();
        drop(cx);
        self.adam.step(&mut self.store, &grads, lr);
        for (id, t) in updates {
            self.store.set(id, t);
        }
        Ok(value)
    }

    /// Thresholded evaluation-mode predictions. The APP plays no part here.
    pub fn predict(&self, samples: &[ImageSample]) -> Result<Vec<Mask>> {
        let mut out = Vec::with_capacity(samples.len());
        let thr = self.config.threshold as f32;
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&ImageSample> = chunk.iter().collect();
            let probs = self.model.foreground_probs(&self.store, stack_images(&refs))?;
            let plane = probs.shape()[1];
            for (s, p) in chunk.iter().zip(probs.data().chunks_exact(plane)) {
                let data = p.iter().map(|&v| (v > thr) as u8).collect();
                out.push(Mask::new(s.mask.height, s.mask.width, data)?);
            }
        }
        Ok(out)
    }

    /// Dataset IoU and mean pixel accuracy.
    pub fn evaluate(&self, samples: &[ImageSample]) -> Result<(f64, f64)> {
        let preds = self.predict(samples)?;
        let gts: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
        let opts = IouOptions {
            empty: self.config.empty_iou,
            classes: self.config.iou_classes,
            aggregate: self.config.iou_aggregate,
        };
        dataset_scores(&preds, &gts, opts)
    }

    /// Segmenter weights and running statistics only; APP parameters are
    /// train-time state and stay out.
    pub fn save_inference_checkpoint(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor<f32>)> = self
            .store
            .entries()
            .filter(|(_, e)| !e.name.starts_with(APP_PREFIX))
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        save_tensors(path, &tensors, metadata)
    }

    pub fn load_inference_checkpoint(&mut self, path: &Path) -> Result<BTreeMap<String, String>> {
        let (tensors, meta) = load_tensors::<f32>(path)?;
        let targets: Vec<_> = self
            .store
            .entries()
            .filter(|(_, e)| !e.name.starts_with(APP_PREFIX))
            .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
            .collect();
        for (id, name, shape) in targets {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{name}`", path.display())))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: `{name}` has shape {:?}, model expects {shape:?}",
                    path.display(),
                    t.shape()
                )));
            }
            self.store.set(id, t.clone());
        }
        Ok(meta)
    }

    /// Everything needed to continue training: all parameters (APP
    /// included), optimiser moments and caller metadata.
    pub fn save_training_checkpoint(&self, path: &Path, mut metadata: BTreeMap<String, String>) -> Result<()> {
        let (step, moments) = self.adam.export_state(&self.store);
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .store
            .entries()
            .map(|(_, e)| (format!("model.{}", e.name), e.value.clone()))
            .collect();
        tensors.extend(moments.into_iter().map(|(n, t)| (format!("optim.{n}"), t)));
        metadata.insert("adam_step".into(), step.to_string());
        save_tensors(path, &tensors, &metadata)
    }

    pub fn load_training_checkpoint(&mut self, path: &Path) -> Result<BTreeMap<String, String>> {
        let (tensors, meta) = load_tensors::<f32>(path)?;
        let mut moments = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("model.") {
                let id = self
                    .store
                    .id(n)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: unknown tensor `{n}`", path.display())))?;
                if self.store.get(id).shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{}: `{n}` has the wrong shape", path.display())));
                }
                self.store.set(id, t);
            } else if let Some(n) = name.strip_prefix("optim.") {
                moments.insert(n.to_string(), t);
            }
        }
        let step = meta
            .get("adam_step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing adam_step", path.display())))?;
        self.adam.import_state(&self.store, step, &moments);
        Ok(meta)
    }
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub dir: Option<PathBuf>,
    pub run_id: String,
    pub config_hash: String,
}

impl RunContext {
    pub fn detached(config: &TrainConfig) -> Self {
        Self {
            dir: None,
            run_id: "run".into(),
            config_hash: run_config_hash(config),
        }
    }

    fn path(&self, suffix: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}{suffix}", self.run_id)))
    }
}

fn check_data(config: &TrainConfig, data: &SplitData) -> Result<(usize, usize)> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::InvalidInput("training split is empty".into()))?;
    if data.test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
    if c != config.model.in_channels {
        return Err(Error::config(
            "model.in_channels",
            format!("data has {c} channels, model expects {}", config.model.in_channels),
        ));
    }
    if let Some(s) = data.all().find(|s| (s.image.channels, s.image.height, s.image.width) != (c, h, w)) {
        return Err(Error::Shape(format!(
            "sample `{}` is {}x{}x{}, expected {c}x{h}x{w}",
            s.origin.file_stem(),
            s.image.channels,
            s.image.height,
            s.image.width
        )));
    }
    Ok((h, w))
}

/// Trains one seed end to end and evaluates the final-epoch model on test.
pub fn train_run(
    config: &TrainConfig,
    data: &SplitData,
    weights: &WeightPair,
    seed: u64,
    ctx: &RunContext,
) -> Result<RunResult> {
    config.validate()?;
    let (h, w) = check_data(config, data)?;
    let mut trainer = Trainer::new(config, *weights, seed, h, w)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);

    let mut start_epoch = 0;
    let mut best_val = f64::NAN;
    if let Some(p) = ctx.path(".train.ckpt").filter(|p| p.exists()) {
        let meta = trainer.load_training_checkpoint(&p)?;
        if meta.get("config_hash") == Some(&ctx.config_hash) {
            start_epoch = meta.get("epoch").and_then(|e| e.parse().ok()).unwrap_or(0);
            best_val = meta.get("best_val_iou").and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
            if let Some(pos) = meta.get("rng_word_pos").and_then(|v| v.parse::<u128>().ok()) {
                order_rng.set_word_pos(pos);
            }
            log::info!("{}: resuming after epoch {start_epoch}", ctx.run_id);
        } else {
            log::warn!("{}: ignoring checkpoint from a different config", ctx.run_id);
            trainer = Trainer::new(config, *weights, seed, h, w)?;
        }
    }

    let val: Vec<ImageSample> = data.val.iter().map(|s| preprocess(s.clone(), &config.augment)).collect();
    let test: Vec<ImageSample> = data.test.iter().map(|s| preprocess(s.clone(), &config.augment)).collect();
    let mut log_file = match ctx.path(".log") {
        Some(p) => {
            let fresh = start_epoch == 0 || !p.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            if fresh {
                writeln!(f, "epoch,lr,train_loss,val_iou").map_err(|e| Error::io(&p, e))?;
            }
            Some((p, f))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in start_epoch..config.epochs {
        let lr = cosine_lr(epoch as f64, config.lr_max, config.lr_min, config.t_max as f64);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<ImageSample> = idx
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
                    rng.set_stream(epoch as u64);
                    augment(data.train[i].clone(), &config.augment, &mut rng)
                })
                .collect();
            let refs: Vec<&ImageSample> = batch.iter().collect();
            loss_sum += trainer.train_step(&refs, lr, epoch, bi)?;
            batches += 1;
        }
        let val_iou = if val.is_empty() { f64::NAN } else { trainer.evaluate(&val)?.0 };
        if !(val_iou <= best_val) {
            best_val = if best_val.is_nan() { val_iou } else { best_val.max(val_iou) };
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        log::debug!("{} epoch {epoch}: lr {lr:.3e} loss {train_loss:.5} val IoU {val_iou:.4}", ctx.run_id);
        if let Some((p, f)) = log_file.as_mut() {
            writeln!(f, "{epoch},{lr:e},{train_loss},{val_iou}").map_err(|e| Error::io(&*p, e))?;
        }
        let done = epoch + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
            if let Some(p) = ctx.path(".train.ckpt") {
                let mut meta = BTreeMap::new();
                meta.insert("config_hash".into(), ctx.config_hash.clone());
                meta.insert("seed".into(), seed.to_string());
                meta.insert("epoch".into(), done.to_string());
                meta.insert("best_val_iou".into(), best_val.to_string());
                meta.insert("rng_word_pos".into(), order_rng.get_word_pos().to_string());
                trainer.save_training_checkpoint(&p, meta)?;
            }
        }
    }

    let (test_iou, test_pixel_accuracy) = trainer.evaluate(&test)?;
    if let Some(p) = ctx.path(".ckpt") {
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".into(), ctx.config_hash.clone());
        meta.insert("seed".into(), seed.to_string());
        meta.insert("epoch".into(), config.epochs.to_string());
        trainer.save_inference_checkpoint(&p, &meta)?;
        if let Some(t) = ctx.path(".train.ckpt").filter(|t| t.exists()) {
            std::fs::remove_file(&t).map_err(|e| Error::io(&t, e))?;
        }
    }
    Ok(RunResult {
        seed,
        test_iou,
        test_pixel_accuracy,
        best_val_iou: best_val,
        epochs_completed: config.epochs,
        config_hash: ctx.config_hash.clone(),
    })
}

/// Outcome of one seed in a sweep.
#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Result<RunResult>,
}

impl SeedOutcome {
    pub fn is_ok(&self) -> bool {
        self.result.is_ok()
    }
}

/// One independent run per seed, in seed-list order. A failing seed is
/// reported in place; the others still run.
pub fn run_seeds(
    config: &TrainConfig,
    data: &SplitData,
    weights: &WeightPair,
    dir: Option<&Path>,
    run_prefix: &str,
) -> Vec<SeedOutcome> {
    let hash = run_config_hash(config);
    config
        .seeds
        .iter()
        .map(|&seed| {
            let ctx = RunContext {
                dir: dir.map(Path::to_path_buf),
                run_id: format!("{run_prefix}seed{seed}"),
                config_hash: hash.clone(),
            };
            let result = train_run(config, data, weights, seed, &ctx);
            if let Err(e) = &result {
                log::error!("{}: {e}", ctx.run_id);
            }
            SeedOutcome { seed, result }
        })
        .collect()
}
