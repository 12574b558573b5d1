//! Autoencoder post-processing (APP): a dense autoencoder over the predicted
//! foreground map, used only to add a reconstruction term to the training loss.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::string_enum;
use crate::nn::{Ctx, Float, Linear, ParamStore, Tape, Tensor, Var};
use crate::weights::WeightPair;

/// Prefix of APP parameters inside a model store.
pub const APP_PREFIX: &str = "app.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppVariant {
    None,
    Relu,
    Gelu,
}

string_enum!(AppVariant, "app variant", { None => "none", Relu => "relu", Gelu => "gelu" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub variant: AppVariant,
    /// Encoder-half widths; the decoder mirrors them. Empty means "pick from
    /// the input size", see [`default_dims`].
    pub dims: Vec<usize>,
    pub lambda_mse: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            variant: AppVariant::None,
            dims: Vec::new(),
            lambda_mse: 1.0,
        }
    }
}

impl AppConfig {
    pub fn resolved_dims(&self, input_dim: usize) -> Vec<usize> {
        if self.dims.is_empty() {
            default_dims(input_dim)
        } else {
            self.dims.clone()
        }
    }
}

/// Hidden widths for an `input_dim`-pixel mask: (2048, 512) from 480x480 up,
/// (1024, 256) from 224x224 up, otherwise input/16 and input/64.
pub fn default_dims(input_dim: usize) -> Vec<usize> {
    if input_dim >= 480 * 480 {
        vec![2048, 512]
    } else if input_dim >= 224 * 224 {
        vec![1024, 256]
    } else {
        vec![(input_dim / 16).max(4), (input_dim / 64).max(2)]
    }
}

#[derive(Debug, Clone)]
pub struct App {
    pub variant: AppVariant,
    pub input_dim: usize,
    layers: Vec<Linear>,
}

/// Builds the APP, or `None` when the variant is `none`.
pub fn build_app<F: Float>(
    config: &AppConfig,
    input_dim: usize,
    store: &mut ParamStore<F>,
    rng: &mut impl Rng,
) -> Result<Option<App>> {
    if config.variant == AppVariant::None {
        return Ok(None);
    }
    let dims = config.resolved_dims(input_dim);
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::config("app.dims", "widths must be positive"));
    }
    if dims[0] >= input_dim {
        return Err(Error::config(
            "app.dims",
            format!("first width {} must be below the input size {input_dim}", dims[0]),
        ));
    }
    let mut widths = vec![input_dim];
    widths.extend(&dims);
    let mut layers = Vec::with_capacity(2 * dims.len());
    for (i, w) in widths.windows(2).enumerate() {
        layers.push(Linear::new(store, &format!("app.enc.{i}"), w[0], w[1], rng));
    }
    let mirrored: Vec<usize> = widths.iter().rev().copied().collect();
    for (i, w) in mirrored.windows(2).enumerate() {
        layers.push(Linear::new(store, &format!("app.dec.{i}"), w[0], w[1], rng));
    }
    Ok(Some(App {
        variant: config.variant,
        input_dim,
        layers,
    }))
}

impl App {
    pub fn num_linear_layers(&self) -> usize {
        self.layers.len()
    }

    /// Maps `[B, input_dim]` maps in `[0, 1]` to reconstructions in `[0, 1]`.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, probs: Var) -> Result<Var> {
        let shape = cx.tape.shape(probs);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "APP expects [B, {}] input, got {shape:?}",
                self.input_dim
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = probs;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h);
            h = if i == last {
                cx.tape.sigmoid(h)
            } else if self.variant == AppVariant::Gelu {
                cx.tape.gelu(h)
            } else {
                cx.tape.relu(h)
            };
        }
        Ok(h)
    }

    /// Evaluation-mode reconstruction of a `[B, H, W]` or `[B, H*W]` map.
    pub fn reconstruct<F: Float>(&self, store: &ParamStore<F>, input: Tensor<F>) -> Result<Tensor<F>> {
        let shape = input.shape().to_vec();
        let b = *shape.first().unwrap_or(&0);
        let flat = input.reshape(vec![b, shape.iter().skip(1).product()]);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, store, false);
        let x = tape.constant(flat);
        let y = self.forward(&cx, x)?;
        let out = tape.value(y).clone();
        Ok(out.reshape(shape))
    }
}

/// `WCE(logits, gt) + lambda * MSE(app_out, gt)`, or WCE alone without an APP output.
///
/// `logits` is `[B, 2, H, W]`; `app_out` is `[B, H*W]`; `gt` holds B*H*W labels.
pub fn combined_loss<F: Float>(
    tape: &Tape<F>,
    logits: Var,
    app_out: Option<Var>,
    gt: &Rc<[u8]>,
    weights: &WeightPair,
    lambda_mse: f64,
) -> Result<Var> {
    let shape = tape.shape(logits);
    let [b, c, h, w] = match shape[..] {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::Shape(format!("logits must be B x 2 x H x W, got {shape:?}"))),
    };
    if c != 2 || gt.len() != b * h * w {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match {} ground-truth pixels",
            gt.len()
        )));
    }
    if let Some(bad) = gt.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidInput(format!("ground truth must be binary, found {bad}")));
    }
    if !tape.value(logits).is_finite() {
        return Err(Error::InvalidInput("logits contain non-finite values".into()));
    }
    if !(weights.background > 0.0 && weights.foreground > 0.0) {
        return Err(Error::InvalidInput("class weights must be positive".into()));
    }
    let wce = tape.weighted_cross_entropy(
        logits,
        gt.clone(),
        [F::cast(weights.background), F::cast(weights.foreground)],
    );
    let Some(out) = app_out else {
        return Ok(wce);
    };
    let out_shape = tape.shape(out);
    if out_shape.iter().product::<usize>() != gt.len() {
        return Err(Error::Shape(format!(
            "APP output {out_shape:?} does not match {} ground-truth pixels",
            gt.len()
        )));
    }
    let target: Rc<[F]> = gt.iter().map(|&v| F::cast(v as f64)).collect();
    let mse = tape.mse(out, target);
    Ok(tape.add_scaled(wce, mse, F::cast(lambda_mse)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::weights::WeightScheme;

    fn pair(bg: f64, fg: f64) -> WeightPair {
        WeightPair::new(bg, fg, WeightScheme::Cdw).unwrap()
    }

    fn app(variant: AppVariant, input: usize, dims: Vec<usize>) -> (ParamStore<f64>, App) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AppConfig {
            variant,
            dims,
            lambda_mse: 1.0,
        };
        let a = build_app(&cfg, input, &mut store, &mut rng).unwrap().unwrap();
        (store, a)
    }

    #[test]
    fn layer_counts_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AppConfig {
            variant: AppVariant::Relu,
            dims: vec![1024, 256],
            lambda_mse: 1.0,
        };
        let a = build_app(&cfg, 224 * 224, &mut store, &mut rng).unwrap().unwrap();
        assert_eq!(a.num_linear_layers(), 4);
        let shapes: Vec<Vec<usize>> = store.entries().map(|(_, e)| e.value.shape().to_vec()).collect();

        let mut gelu_store = ParamStore::<f32>::new();
        let gelu = AppConfig {
            variant: AppVariant::Gelu,
            ..cfg.clone()
        };
        build_app(&gelu, 224 * 224, &mut gelu_store, &mut rng).unwrap().unwrap();
        let gelu_shapes: Vec<Vec<usize>> = gelu_store.entries().map(|(_, e)| e.value.shape().to_vec()).collect();
        assert_eq!(shapes, gelu_shapes);
        assert_eq!(shapes[0], vec![1024, 224 * 224]);
        assert_eq!(shapes.last().unwrap(), &vec![224 * 224]);

        let none = AppConfig::default();
        assert!(build_app(&none, 64, &mut store, &mut rng).unwrap().is_none());
    }

    #[test]
    fn non_compressive_dims_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AppConfig {
            variant: AppVariant::Relu,
            dims: vec![64, 8],
            lambda_mse: 1.0,
        };
        assert!(build_app(&cfg, 64, &mut store, &mut rng).is_err());
    }

    #[test]
    fn output_in_unit_range_deterministic_and_noisy() {
        let (store, a) = app(AppVariant::Relu, 64, vec![16, 4]);
        let crisp: Vec<f64> = (0..128).map(|i| ((i / 8) % 2) as f64).collect();
        let input = Tensor::new(vec![2, 8, 8], crisp.clone());
        let out = a.reconstruct(&store, input.clone()).unwrap();
        assert_eq!(out.shape(), &[2, 8, 8]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out, a.reconstruct(&store, input).unwrap());
        let mse: f64 = out.data().iter().zip(&crisp).map(|(o, g)| (o - g).powi(2)).sum::<f64>() / 128.0;
        assert!(mse > 0.0);
        assert!(a.reconstruct(&store, Tensor::zeros(&[1, 7, 7])).is_err());
    }

    #[test]
    fn single_pixel_hand_value() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.3]));
        let gt: Rc<[u8]> = vec![1].into();
        let loss = combined_loss(&tape, logits, None, &gt, &pair(0.1479, 0.8521), 1.0).unwrap();
        let want = 0.8521 * std::f64::consts::LN_2;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
        assert!((want - 0.59063).abs() < 1e-5);
    }

    #[test]
    fn perfect_prediction_and_pure_mse() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2, 1, 2], vec![-800.0, 800.0, 800.0, -800.0]));
        let gt: Rc<[u8]> = vec![1, 0].into();
        let app_out = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]));
        let loss = combined_loss(&tape, logits, Some(app_out), &gt, &pair(0.3, 0.7), 1.0).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let ones: Rc<[u8]> = vec![1, 1].into();
        let logits = tape.leaf(Tensor::new(vec![1, 2, 1, 2], vec![-800.0, -800.0, 800.0, 800.0]));
        let zeros = tape.leaf(Tensor::zeros(&[1, 2]));
        let loss = combined_loss(&tape, logits, Some(zeros), &ones, &pair(0.3, 0.7), 1.0).unwrap();
        assert_eq!(tape.value(loss).item(), 1.0);
    }

    #[test]
    fn wce_scaling_and_unit_weights() {
        let tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let logits = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vals.clone()));
        let gt: Rc<[u8]> = vec![0, 1, 1, 0].into();
        let base = tape.value(combined_loss(&tape, logits, None, &gt, &pair(1.0, 1.0), 1.0).unwrap()).item();
        let mut ce = 0.0;
        for p in 0..4 {
            let (l0, l1) = (vals[p], vals[4 + p]);
            let lse = (l0.exp() + l1.exp()).ln();
            ce -= if gt[p] == 1 { l1 - lse } else { l0 - lse };
        }
        assert!((base - ce / 4.0).abs() < 1e-12);
        let scaled = tape.value(combined_loss(&tape, logits, None, &gt, &pair(2.5, 2.5), 1.0).unwrap()).item();
        assert!((scaled - 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn wce_sees_which_channel_is_foreground() {
        let tape = Tape::<f64>::new();
        let gt: Rc<[u8]> = vec![1, 0].into();
        let a = tape.leaf(Tensor::new(vec![1, 2, 1, 2], vec![0.2, 1.0, 1.5, -0.4]));
        let b = tape.leaf(Tensor::new(vec![1, 2, 1, 2], vec![1.5, -0.4, 0.2, 1.0]));
        let la = tape.value(combined_loss(&tape, a, None, &gt, &pair(0.3, 0.7), 1.0).unwrap()).item();
        let lb = tape.value(combined_loss(&tape, b, None, &gt, &pair(0.3, 0.7), 1.0).unwrap()).item();
        assert!((la - lb).abs() > 1e-3);
    }

    #[test]
    fn rejects_bad_ground_truth_and_logits() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 2, 1, 2]));
        let bad: Rc<[u8]> = vec![0, 2].into();
        assert!(combined_loss(&tape, logits, None, &bad, &pair(0.5, 0.5), 1.0).is_err());
        let nan = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![f64::NAN, 0.0]));
        let gt: Rc<[u8]> = vec![0].into();
        assert!(combined_loss(&tape, nan, None, &gt, &pair(0.5, 0.5), 1.0).is_err());
    }

    #[test]
    fn mse_depends_only_on_the_foreground_map() {
        // Two logit tensors with the same softmax foreground map give the
        // same MSE term even though their raw channels differ.
        let (store, a) = app(AppVariant::Gelu, 4, vec![2]);
        let tape = Tape::<f64>::new();
        let cx = Ctx::new(&tape, &store, true);
        let l1 = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 1.0, 1.5, 2.0, 2.5]));
        let l2 = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 6.0, 6.5, 7.0, 7.5]));
        let gt: Rc<[u8]> = vec![1, 0, 1, 0].into();
        let mut mse = Vec::new();
        for l in [l1, l2] {
            let p = tape.foreground_prob(l);
            let out = a.forward(&cx, p).unwrap();
            let target: Rc<[f64]> = gt.iter().map(|&v| v as f64).collect();
            mse.push(tape.value(tape.mse(out, target)).item());
        }
        assert!((mse[0] - mse[1]).abs() < 1e-12);
    }
}
