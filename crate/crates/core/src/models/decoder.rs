use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Ctx, Float, Linear, ParamStore, Var};

/// Squeeze-and-excitation: per-channel gate from a global-pool bottleneck.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl SeBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels < reduction || channels % reduction != 0 {
            return Err(Error::config(
                "model.se_reduction",
                format!("{channels} channels cannot be reduced by {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            channels,
        })
    }

    /// The `[B, C]` gate in `(0, 1)`.
    pub fn gate<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let squeezed = cx.tape.global_avg_pool(x);
        let hidden = cx.tape.relu(self.fc1.forward(cx, squeezed));
        cx.tape.sigmoid(self.fc2.forward(cx, hidden))
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let gate = self.gate(cx, x);
        cx.tape.scale_channels(x, gate)
    }
}

/// Upsample, concatenate skips, conv, batch norm, ReLU, squeeze-and-excitation.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub conv: ConvBn,
    pub se: SeBlock,
}

impl DecoderBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        se_reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(store, name, "conv", "bn", in_channels, out_channels, 3, 1, true, rng),
            se: SeBlock::new(store, &format!("{name}.se"), out_channels, se_reduction, rng)?,
        })
    }

    /// `below` is upsampled 2x and concatenated with `skips` (in order).
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, below: Var, skips: &[Var]) -> Var {
        let mut parts = vec![cx.tape.upsample2x(below)];
        parts.extend_from_slice(skips);
        let x = cx.tape.concat_channels(&parts);
        self.se.forward(cx, self.conv.forward(cx, x))
    }
}

/// Plain U-Net decoder: one block per level, one skip each.
#[derive(Debug, Clone)]
pub struct UnetDecoder {
    blocks: [DecoderBlock; 3],
}

impl UnetDecoder {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        skips: [usize; 4],
        decoder: [usize; 3],
        se_reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b0 = DecoderBlock::new(store, "decoder.blocks.0", skips[3] + skips[2], decoder[0], se_reduction, rng)?;
        let b1 = DecoderBlock::new(store, "decoder.blocks.1", decoder[0] + skips[1], decoder[1], se_reduction, rng)?;
        let b2 = DecoderBlock::new(store, "decoder.blocks.2", decoder[1] + skips[0], decoder[2], se_reduction, rng)?;
        Ok(Self { blocks: [b0, b1, b2] })
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, f: [Var; 4]) -> Var {
        let x = self.blocks[0].forward(cx, f[3], &[f[2]]);
        let x = self.blocks[1].forward(cx, x, &[f[1]]);
        self.blocks[2].forward(cx, x, &[f[0]])
    }
}

/// Nested U-Net++ decoder. Node `x_{i}_{j}` sits at level `i` (stride 2^i)
/// after `j` upsampling steps and sees every earlier node on its level.
#[derive(Debug, Clone)]
pub struct UnetPlusPlusDecoder {
    x21: DecoderBlock,
    x11: DecoderBlock,
    x12: DecoderBlock,
    x01: DecoderBlock,
    x02: DecoderBlock,
    x03: DecoderBlock,
}

impl UnetPlusPlusDecoder {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        s: [usize; 4],
        d: [usize; 3],
        r: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut block =
            |name: &str, inp: usize, out: usize| DecoderBlock::new(store, &format!("decoder.{name}"), inp, out, r, rng);
        Ok(Self {
            x21: block("x_2_1", s[3] + s[2], d[0])?,
            x11: block("x_1_1", s[2] + s[1], d[1])?,
            x12: block("x_1_2", d[0] + s[1] + d[1], d[1])?,
            x01: block("x_0_1", s[1] + s[0], d[2])?,
            x02: block("x_0_2", d[1] + s[0] + d[2], d[2])?,
            x03: block("x_0_3", d[1] + s[0] + 2 * d[2], d[2])?,
        })
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, f: [Var; 4]) -> Var {
        let x21 = self.x21.forward(cx, f[3], &[f[2]]);
        let x11 = self.x11.forward(cx, f[2], &[f[1]]);
        let x12 = self.x12.forward(cx, x21, &[f[1], x11]);
        let x01 = self.x01.forward(cx, f[1], &[f[0]]);
        let x02 = self.x02.forward(cx, x11, &[f[0], x01]);
        self.x03.forward(cx, x12, &[f[0], x01, x02])
    }
}
