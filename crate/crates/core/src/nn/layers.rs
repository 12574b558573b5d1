use rand::Rng;

use super::params::{init, ParamId, ParamKind, ParamStore};
use super::tape::{ConvGeometry, Tape, Var};
use super::tensor::{Float, Tensor};

/// Everything a forward pass needs: the tape to record on, the parameter
/// values, and whether batch norm uses batch statistics.
pub struct Ctx<'a, F> {
    pub tape: &'a Tape<F>,
    pub store: &'a ParamStore<F>,
    pub train: bool,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(tape: &'a Tape<F>, store: &'a ParamStore<F>, train: bool) -> Self {
        Self { tape, store, train }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.register(
            format!("{name}.weight"),
            ParamKind::Trainable,
            init::kaiming_normal_fan_out(&shape, rng),
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                ParamKind::Trainable,
                init::uniform_fan_in(&[out_channels], in_channels * kernel * kernel, rng),
            )
        });
        Self {
            weight,
            bias,
            geom: ConvGeometry {
                kernel,
                stride,
                padding: kernel / 2,
            },
            in_channels,
            out_channels,
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.register(
            format!("{name}.weight"),
            ParamKind::Trainable,
            Tensor::full(&[channels], F::one()),
        );
        let beta = store.register(
            format!("{name}.bias"),
            ParamKind::Trainable,
            Tensor::zeros(&[channels]),
        );
        let running_mean = store.register(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[channels]),
        );
        let running_var = store.register(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Tensor::full(&[channels], F::one()),
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let mean = cx.store.get(self.running_mean).data();
        let var = cx.store.get(self.running_var).data();
        let (y, stats) = cx
            .tape
            .batch_norm(x, gamma, beta, mean, var, F::cast(self.eps), cx.train);
        if let Some((bm, bv)) = stats {
            let m = F::cast(self.momentum);
            let keep = F::one() - m;
            let new_mean: Vec<F> = mean.iter().zip(&bm).map(|(&r, &b)| keep * r + m * b).collect();
            let new_var: Vec<F> = var.iter().zip(&bv).map(|(&r, &b)| keep * r + m * b).collect();
            let c = new_mean.len();
            cx.tape
                .push_buffer_update(self.running_mean, Tensor::new(vec![c], new_mean));
            cx.tape
                .push_buffer_update(self.running_var, Tensor::new(vec![c], new_var));
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            ParamKind::Trainable,
            init::uniform_fan_in(&[out_features, in_features], in_features, rng),
        );
        let bias = store.register(
            format!("{name}.bias"),
            ParamKind::Trainable,
            init::uniform_fan_in(&[out_features], in_features, rng),
        );
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.linear(x, w, Some(b))
    }
}

/// Convolution, batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        conv_name: &str,
        bn_name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let prefix = |s: &str| {
            if name.is_empty() {
                s.to_string()
            } else {
                format!("{name}.{s}")
            }
        };
        Self {
            conv: Conv2d::new(
                store,
                &prefix(conv_name),
                in_channels,
                out_channels,
                kernel,
                stride,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &prefix(bn_name), out_channels),
            relu,
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let y = self.bn.forward(cx, self.conv.forward(cx, x));
        if self.relu {
            cx.tape.relu(y)
        } else {
            y
        }
    }
}
