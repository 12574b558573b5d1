//! ResNet-family feature extractors returning four skip levels at strides
//! 1, 2, 4 and 8.

use rand::Rng;

use super::EncoderKind;
use crate::nn::{ConvBn, Ctx, Float, ParamStore, Var};

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
}

#[derive(Debug, Clone)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

fn downsample<F: Float>(
    store: &mut ParamStore<F>,
    name: &str,
    inp: usize,
    out: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Option<ConvBn> {
    (stride != 1 || inp != out)
        .then(|| ConvBn::new(store, &format!("{name}.downsample"), "0", "1", inp, out, 1, stride, false, rng))
}

impl Block {
    fn basic<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Block::Basic(BasicBlock {
            conv1: ConvBn::new(store, name, "conv1", "bn1", inp, out, 3, stride, true, rng),
            conv2: ConvBn::new(store, name, "conv2", "bn2", out, out, 3, 1, false, rng),
            downsample: downsample(store, name, inp, out, stride, rng),
        })
    }

    fn bottleneck<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        width: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let out = width * 4;
        Block::Bottleneck(Bottleneck {
            conv1: ConvBn::new(store, name, "conv1", "bn1", inp, width, 1, 1, true, rng),
            conv2: ConvBn::new(store, name, "conv2", "bn2", width, width, 3, stride, true, rng),
            conv3: ConvBn::new(store, name, "conv3", "bn3", width, out, 1, 1, false, rng),
            downsample: downsample(store, name, inp, out, stride, rng),
        })
    }

    fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let (y, shortcut) = match self {
            Block::Basic(b) => {
                let y = b.conv2.forward(cx, b.conv1.forward(cx, x));
                (y, b.downsample.as_ref().map(|d| d.forward(cx, x)))
            }
            Block::Bottleneck(b) => {
                let y = b.conv3.forward(cx, b.conv2.forward(cx, b.conv1.forward(cx, x)));
                (y, b.downsample.as_ref().map(|d| d.forward(cx, x)))
            }
        };
        let sum = cx.tape.add(y, shortcut.unwrap_or(x));
        cx.tape.relu(sum)
    }
}

/// Layout of one encoder family.
struct Plan {
    stem_channels: usize,
    stem_kernel: usize,
    bottleneck: bool,
    /// Blocks in layer1..layer4; a zero count drops the stage.
    blocks: [usize; 4],
    widths: [usize; 4],
}

fn plan(kind: EncoderKind) -> Plan {
    let resnet = |bottleneck, blocks| Plan {
        stem_channels: 64,
        stem_kernel: 7,
        bottleneck,
        blocks,
        widths: [64, 128, 256, 512],
    };
    match kind {
        EncoderKind::Tiny => Plan {
            stem_channels: 8,
            stem_kernel: 3,
            bottleneck: false,
            blocks: [0, 1, 1, 1],
            widths: [8, 8, 16, 32],
        },
        EncoderKind::Resnet18 => resnet(false, [2, 2, 2, 2]),
        EncoderKind::Resnet34 => resnet(false, [3, 4, 6, 3]),
        EncoderKind::Resnet50 => resnet(true, [3, 4, 6, 3]),
        EncoderKind::Resnet101 => resnet(true, [3, 4, 23, 3]),
    }
}

/// Stem, optional full-resolution `layer1`, then three stride-2 stages.
///
/// Parameter names follow the torchvision layout under `encoder.` so
/// ImageNet exports load key-for-key. The max-pool and the stem stride are
/// dropped so the finest skip sits at input resolution.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: ConvBn,
    stages: [Vec<Block>; 4],
    raw_channels: [usize; 4],
}

impl Encoder {
    pub fn new<F: Float>(store: &mut ParamStore<F>, kind: EncoderKind, in_channels: usize, rng: &mut impl Rng) -> Self {
        let p = plan(kind);
        let stem = ConvBn::new(
            store,
            "encoder",
            "conv1",
            "bn1",
            in_channels,
            p.stem_channels,
            p.stem_kernel,
            1,
            true,
            rng,
        );
        let expansion = if p.bottleneck { 4 } else { 1 };
        let mut inp = p.stem_channels;
        let mut raw_channels = [0; 4];
        let stages: [Vec<Block>; 4] = std::array::from_fn(|s| {
            let stride = if s == 0 { 1 } else { 2 };
            let blocks = (0..p.blocks[s])
                .map(|b| {
                    let name = format!("encoder.layer{}.{b}", s + 1);
                    let st = if b == 0 { stride } else { 1 };
                    let block = if p.bottleneck {
                        Block::bottleneck(store, &name, inp, p.widths[s], st, rng)
                    } else {
                        Block::basic(store, &name, inp, p.widths[s], st, rng)
                    };
                    inp = p.widths[s] * expansion;
                    block
                })
                .collect();
            raw_channels[s] = inp;
            blocks
        });
        Self {
            stem,
            stages,
            raw_channels,
        }
    }

    /// Channel counts of the four feature maps, finest first.
    pub fn channels(&self) -> [usize; 4] {
        self.raw_channels
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> [Var; 4] {
        let mut h = self.stem.forward(cx, x);
        let mut out = [h; 4];
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = b.forward(cx, h);
            }
            out[s] = h;
        }
        out
    }
}
