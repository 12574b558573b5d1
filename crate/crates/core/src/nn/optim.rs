use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamKind, ParamStore};
use super::tape::Gradients;
use super::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Parameters without a
    /// gradient are treated as having a zero gradient so weight decay still
    /// applies.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::cast(c.beta1), F::cast(c.beta2));
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = F::cast(lr / bias1);
        let bias2_sqrt = F::cast(bias2.sqrt());
        let eps = F::cast(c.eps);
        let wd = F::cast(c.weight_decay);

        for id in store.trainable_ids() {
            let param = store.get_mut(id);
            let zeros;
            let grad = match grads.param(id) {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(param.shape());
                    &zeros
                }
            };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + wd * *p;
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let denom = v.sqrt() / bias2_sqrt + eps;
                *p -= step_size * *m / denom;
            }
        }
    }

    /// Moment tensors keyed by parameter name, for checkpointing.
    pub fn export_state(&self, store: &ParamStore<F>) -> (u64, Vec<(String, Tensor<F>)>) {
        let mut out = Vec::new();
        let mut ids: Vec<_> = self.moments.keys().copied().collect();
        ids.sort();
        for id in ids {
            let (m, v) = &self.moments[&id];
            let name = store.name(id);
            out.push((format!("{name}.exp_avg"), m.clone()));
            out.push((format!("{name}.exp_avg_sq"), v.clone()));
        }
        (self.step, out)
    }

    pub fn import_state(
        &mut self,
        store: &ParamStore<F>,
        step: u64,
        tensors: &BTreeMap<String, Tensor<F>>,
    ) {
        self.step = step;
        self.moments.clear();
        for (id, entry) in store.entries() {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let m = tensors.get(&format!("{}.exp_avg", entry.name));
            let v = tensors.get(&format!("{}.exp_avg_sq", entry.name));
            if let (Some(m), Some(v)) = (m, v) {
                self.moments.insert(id, (m.clone(), v.clone()));
            }
        }
    }
}
