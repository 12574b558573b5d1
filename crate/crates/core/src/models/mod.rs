//! U-Net and U-Net++ segmenters over ResNet-family encoders.

mod decoder;
mod encoder;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_tensors_where, save_tensors};
use crate::nn::{ConvBn, Conv2d, Ctx, Float, ParamKind, ParamStore, Tape, Tensor, Var};

pub use decoder::{DecoderBlock, SeBlock, UnetDecoder, UnetPlusPlusDecoder};
pub use encoder::Encoder;

/// Number of downsampling stages; inputs must be divisible by `2^ENCODER_DEPTH`.
pub const ENCODER_DEPTH: usize = 3;
/// Skip widths the decoder sees from the three downsampling stages.
pub const ENCODER_FILTERS: [usize; 3] = [128, 256, 512];
pub const NUM_CLASSES: usize = 2;

/// Prefix of encoder parameters inside a model store.
pub const ENCODER_PREFIX: &str = "encoder.";

macro_rules! string_enum {
    ($name:ident, $what:literal, { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL.iter().copied().find(|v| v.as_str() == s).ok_or_else(|| {
                    let options: Vec<&str> = $name::ALL.iter().map(|v| v.as_str()).collect();
                    Error::InvalidInput(format!(
                        "unknown {} `{s}`, expected one of {{{}}}",
                        $what,
                        options.join(", ")
                    ))
                })
            }
        }
    };
}
pub(crate) use string_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Unet,
    Unetpp,
}

string_enum!(Architecture, "architecture", { Unet => "unet", Unetpp => "unetpp" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Three narrow stages (8/16/32), for quick checks only.
    Tiny,
    Resnet18,
    Resnet34,
    Resnet50,
    Resnet101,
}

string_enum!(EncoderKind, "encoder", {
    Tiny => "tiny",
    Resnet18 => "resnet18",
    Resnet34 => "resnet34",
    Resnet50 => "resnet50",
    Resnet101 => "resnet101",
});

impl EncoderKind {
    pub fn is_bottleneck(&self) -> bool {
        matches!(self, EncoderKind::Resnet50 | EncoderKind::Resnet101)
    }

    /// Skip widths at strides 1, 2, 4, 8 as seen by the decoder.
    pub fn skip_channels(&self) -> [usize; 4] {
        match self {
            EncoderKind::Tiny => [8, 8, 16, 32],
            _ => [64, ENCODER_FILTERS[0], ENCODER_FILTERS[1], ENCODER_FILTERS[2]],
        }
    }

    pub fn default_decoder_channels(&self) -> [usize; 3] {
        match self {
            EncoderKind::Tiny => [32, 16, 8],
            _ => [256, 128, 64],
        }
    }

    pub fn default_se_reduction(&self) -> usize {
        match self {
            EncoderKind::Tiny => 4,
            _ => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub in_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub se_reduction: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl SegModelConfig {
    pub fn new(architecture: Architecture, encoder: EncoderKind, in_channels: usize) -> Self {
        Self {
            architecture,
            encoder,
            in_channels,
            decoder_channels: encoder.default_decoder_channels().to_vec(),
            se_reduction: encoder.default_se_reduction(),
            pretrained_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_channels.len() != ENCODER_DEPTH {
            return Err(Error::config(
                "model.decoder_channels",
                format!(
                    "expected {ENCODER_DEPTH} entries, got {}",
                    self.decoder_channels.len()
                ),
            ));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::config(
                "model.in_channels",
                format!("expected 1 or 3, got {}", self.in_channels),
            ));
        }
        for &c in &self.decoder_channels {
            if self.se_reduction == 0 || c < self.se_reduction || c % self.se_reduction != 0 {
                return Err(Error::config(
                    "model.se_reduction",
                    format!(
                        "decoder width {c} is not a positive multiple of reduction {}",
                        self.se_reduction
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum DecoderKind {
    Unet(UnetDecoder),
    UnetPlusPlus(UnetPlusPlusDecoder),
}

/// Layer structure of a segmenter. Parameter values live in a [`ParamStore`]
/// shared with anything trained jointly.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub config: SegModelConfig,
    encoder: Encoder,
    projections: Option<[ConvBn; 4]>,
    decoder: DecoderKind,
    head: Conv2d,
}

impl Segmenter {
    /// Registers all parameters in `store` and, if configured, loads the
    /// pretrained encoder.
    pub fn build<F: Float>(config: &SegModelConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, config.encoder, config.in_channels, rng);
        let skips = config.encoder.skip_channels();
        let projections = config.encoder.is_bottleneck().then(|| {
            let raw = encoder.channels();
            std::array::from_fn(|i| {
                ConvBn::new(store, &format!("skip_proj.{i}"), "0", "1", raw[i], skips[i], 1, 1, true, rng)
            })
        });
        let d: [usize; 3] = [
            config.decoder_channels[0],
            config.decoder_channels[1],
            config.decoder_channels[2],
        ];
        let decoder = match config.architecture {
            Architecture::Unet => DecoderKind::Unet(UnetDecoder::new(store, skips, d, config.se_reduction, rng)?),
            Architecture::Unetpp => {
                DecoderKind::UnetPlusPlus(UnetPlusPlusDecoder::new(store, skips, d, config.se_reduction, rng)?)
            }
        };
        let head = Conv2d::new(store, "head", d[2], NUM_CLASSES, 1, 1, true, rng);
        if let Some(path) = &config.pretrained_weights {
            load_encoder_weights(store, path)?;
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            projections,
            decoder,
            head,
        })
    }

    /// Validates a `[B, C, H, W]` input shape.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [b, c, h, w] = match shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => return Err(Error::Shape(format!("expected a B x C x H x W batch, got {shape:?}"))),
        };
        let factor = 1 << ENCODER_DEPTH;
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty batch {shape:?}")));
        }
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} must be divisible by {factor}"
            )));
        }
        Ok(())
    }

    /// Logits `[B, 2, H, W]`.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Result<Var> {
        self.check_input(&cx.tape.shape(x))?;
        let mut f = self.encoder.forward(cx, x);
        if let Some(proj) = &self.projections {
            for (fi, p) in f.iter_mut().zip(proj) {
                *fi = p.forward(cx, *fi);
            }
        }
        let y = match &self.decoder {
            DecoderKind::Unet(d) => d.forward(cx, f),
            DecoderKind::UnetPlusPlus(d) => d.forward(cx, f),
        };
        Ok(self.head.forward(cx, y))
    }

    /// Evaluation-mode logits without recording a graph.
    pub fn logits<F: Float>(&self, store: &ParamStore<F>, batch: Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, store, false);
        let x = tape.constant(batch);
        let y = self.forward(&cx, x)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    /// Evaluation-mode foreground probabilities `[B, H*W]`.
    pub fn foreground_probs<F: Float>(&self, store: &ParamStore<F>, batch: Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, store, false);
        let x = tape.constant(batch);
        let y = self.forward(&cx, x)?;
        let p = tape.foreground_prob(y);
        let out = tape.value(p).clone();
        Ok(out)
    }
}

/// Number of trainable scalars under `prefix` ("" for all).
pub fn count_parameters<F: Float>(store: &ParamStore<F>, prefix: &str) -> usize {
    store
        .with_prefix(prefix)
        .filter(|(_, e)| e.kind == ParamKind::Trainable)
        .map(|(_, e)| e.value.numel())
        .sum()
}

/// Loads encoder weights keyed by torchvision-style paths (`conv1.weight`,
/// `layer2.0.bn1.running_mean`, ...). Keys may also carry the `encoder.`
/// prefix. A 3-channel stem loads into a 1-channel model by summing over
/// input channels. Missing keys and other shape mismatches are errors.
pub fn load_encoder_weights<F: Float>(store: &mut ParamStore<F>, path: &Path) -> Result<usize> {
    let wanted: Vec<String> = store
        .with_prefix(ENCODER_PREFIX)
        .map(|(_, e)| e.name[ENCODER_PREFIX.len()..].to_string())
        .collect();
    let (tensors, _) = load_tensors_where::<F>(path, |name| {
        let bare = name.strip_prefix(ENCODER_PREFIX).unwrap_or(name);
        wanted.iter().any(|w| w == bare)
    })?;
    let targets: Vec<_> = store
        .with_prefix(ENCODER_PREFIX)
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in &targets {
        let bare = &name[ENCODER_PREFIX.len()..];
        let t = tensors
            .get(bare)
            .or_else(|| tensors.get(name.as_str()))
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: missing encoder tensor `{bare}`; is this file for a different encoder?",
                    path.display()
                ))
            })?;
        let value = if t.shape() == shape.as_slice() {
            t.clone()
        } else if bare == "conv1.weight" && t.shape().len() == 4 && shape[1] == 1 && t.shape()[0] == shape[0] && t.shape()[2..] == shape[2..] {
            sum_input_channels(t)
        } else {
            return Err(Error::Checkpoint(format!(
                "{}: encoder tensor `{bare}` has shape {:?}, model expects {shape:?}",
                path.display(),
                t.shape()
            )));
        };
        store.set(*id, value);
    }
    Ok(targets.len())
}

fn sum_input_channels<F: Float>(t: &Tensor<F>) -> Tensor<F> {
    let [o, i, kh, kw] = t.dims4();
    let k = kh * kw;
    let mut out = vec![F::zero(); o * k];
    for oc in 0..o {
        for ic in 0..i {
            for p in 0..k {
                out[oc * k + p] += t.data()[(oc * i + ic) * k + p];
            }
        }
    }
    Tensor::new(vec![o, 1, kh, kw], out)
}

/// Writes the encoder's parameters and running statistics with bare
/// (unprefixed) keys, the layout [`load_encoder_weights`] reads.
pub fn save_encoder_weights<F: Float>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let tensors: Vec<(String, Tensor<F>)> = store
        .with_prefix(ENCODER_PREFIX)
        .map(|(_, e)| (e.name[ENCODER_PREFIX.len()..].to_string(), e.value.clone()))
        .collect();
    save_tensors(path, &tensors, &Default::default())
}
