//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. `Tape::backward` walks the nodes in reverse and
//! returns gradients for every leaf that asked for one.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Float, Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    AddScaled {
        a: Var,
        b: Var,
        alpha: F,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Upsample2x(Var),
    Concat {
        parts: Vec<Var>,
    },
    Reshape(Var),
    ForegroundProb(Var),
    WeightedCe {
        logits: Var,
        target: Rc<[u8]>,
        weights: [F; 2],
    },
    Mse {
        pred: Var,
        target: Rc<[F]>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A running-statistics update produced by a training-mode batch norm.
pub type BufferUpdate<F> = (ParamId, Tensor<F>);

pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    record: bool,
    buffer_updates: RefCell<Vec<BufferUpdate<F>>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    by_var: HashMap<usize, Tensor<F>>,
    by_param: HashMap<ParamId, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.by_var.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    /// A tape that records ops for backpropagation.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// A tape that only evaluates; nothing can be differentiated.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if self.record && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input (no gradient).
    pub fn constant(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient will be reported by `backward`.
    pub fn leaf(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes.borrow_mut()[v.0].param = Some(id);
        v
    }

    pub fn push_buffer_update(&self, id: ParamId, value: Tensor<F>) {
        if self.record {
            self.buffer_updates.borrow_mut().push((id, value));
        }
    }

    pub fn take_buffer_updates(&self) -> Vec<BufferUpdate<F>> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let bv = b.map(|b| &nodes[b.0].value);
            conv2d_forward(xv, wv, bv, geom)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Batch norm over (N, H, W) per channel. With `batch_stats` the batch
    /// mean/variance normalise the input; otherwise `mean`/`var` do.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
        batch_stats: bool,
    ) -> (Var, Option<(Vec<F>, Vec<F>)>) {
        let (out, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let [n, c, h, w] = xv.dims4();
            let hw = h * w;
            let count = n * hw;
            let xd = xv.data();
            let (mu, sigma2) = if batch_stats {
                let mut mu = vec![F::zero(); c];
                let mut s2 = vec![F::zero(); c];
                for ch in 0..c {
                    let mut sum = F::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        sum += xd[off..off + hw].iter().copied().sum::<F>();
                    }
                    let m = sum / F::cast(count as f64);
                    let mut sq = F::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        sq += xd[off..off + hw].iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                    }
                    mu[ch] = m;
                    s2[ch] = sq / F::cast(count as f64);
                }
                (mu, s2)
            } else {
                (mean.to_vec(), var.to_vec())
            };
            let inv_std: Vec<F> = sigma2.iter().map(|&v| (v + eps).sqrt().recip()).collect();
            let g = nodes[gamma.0].value.data();
            let bt = nodes[beta.0].value.data();
            let mut xhat = vec![F::zero(); xd.len()];
            let mut out = vec![F::zero(); xd.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let (m, is, gg, bb) = (mu[ch], inv_std[ch], g[ch], bt[ch]);
                    for i in off..off + hw {
                        let xh = (xd[i] - m) * is;
                        xhat[i] = xh;
                        out[i] = gg * xh + bb;
                    }
                }
            }
            let stats = batch_stats.then(|| {
                // Unbiased variance for the running estimate.
                let unbias = if count > 1 {
                    F::cast(count as f64) / F::cast((count - 1) as f64)
                } else {
                    F::one()
                };
                (mu.clone(), sigma2.iter().map(|&v| v * unbias).collect())
            });
            (Tensor::new(xv.shape().to_vec(), out), xhat, inv_std, stats)
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let keep = self.record && rg;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: if keep { xhat } else { Vec::new() },
                inv_std,
                batch_stats,
            },
            rg,
        );
        (v, stats)
    }

    pub fn relu(&self, x: Var) -> Var {
        // NaN passes through so corrupted inputs surface as a non-finite loss.
        let out = self.value(x).map(|v| if v > F::zero() || v.is_nan() { v } else { F::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            out.add_assign(&nodes[b.0].value);
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a + alpha * b` for equally shaped operands.
    pub fn add_scaled(&self, a: Var, b: Var, alpha: F) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "add_scaled shape mismatch");
            Tensor::new(
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| x + alpha * y).collect(),
            )
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddScaled { a, b, alpha }, rg)
    }

    /// `x[b, c, :, :] * gate[b, c]`.
    pub fn scale_channels(&self, x: Var, gate: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let gv = &nodes[gate.0].value;
            let [n, c, h, w] = xv.dims4();
            assert_eq!(gv.shape(), &[n, c], "gate shape mismatch");
            let hw = h * w;
            let mut out = xv.data().to_vec();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let g = gv.data()[i];
                chunk.iter_mut().for_each(|v| *v *= g);
            }
            Tensor::new(xv.shape().to_vec(), out)
        };
        let rg = self.rg(x) || self.rg(gate);
        self.push(out, Op::ScaleChannels { x, gate }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let [n, c, h, w] = xv.dims4();
            let hw = F::cast((h * w) as f64);
            let data = xv
                .data()
                .chunks(h * w)
                .map(|ch| ch.iter().copied().sum::<F>() / hw)
                .collect();
            Tensor::new(vec![n, c], data)
        };
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// `x [N, in] * w^T [in, out] + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let [n, fin] = xv.dims2();
            let [fout, win] = wv.dims2();
            assert_eq!(fin, win, "linear: input has {fin} features, weight expects {win}");
            let mut out = vec![F::zero(); n * fout];
            if let Some(b) = b {
                let bd = nodes[b.0].value.data();
                for row in out.chunks_mut(fout) {
                    row.copy_from_slice(bd);
                }
            }
            gemm(
                n,
                fin,
                fout,
                F::one(),
                xv.data(),
                Layout::row_major(fin),
                wv.data(),
                Layout::transposed(fin),
                F::one(),
                &mut out,
                Layout::row_major(fout),
            );
            Tensor::new(vec![n, fout], out)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let [n, c, h, w] = xv.dims4();
            let (h2, w2) = (2 * h, 2 * w);
            let mut out = vec![F::zero(); n * c * h2 * w2];
            for (plane, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
                for i in 0..h {
                    let src = &plane[i * w..(i + 1) * w];
                    let row = &mut dst[2 * i * w2..(2 * i + 1) * w2];
                    for (j, &v) in src.iter().enumerate() {
                        row[2 * j] = v;
                        row[2 * j + 1] = v;
                    }
                    let (top, bottom) = dst[2 * i * w2..(2 * i + 2) * w2].split_at_mut(w2);
                    bottom.copy_from_slice(top);
                }
            }
            Tensor::new(vec![n, c, h2, w2], out)
        };
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let [n, _, h, w] = nodes[parts[0].0].value.dims4();
            let mut total_c = 0;
            for p in parts {
                let [pn, pc, ph, pw] = nodes[p.0].value.dims4();
                assert!(
                    pn == n && ph == h && pw == w,
                    "concat: part {:?} does not match [{n}, _, {h}, {w}]",
                    nodes[p.0].value.shape()
                );
                total_c += pc;
            }
            let hw = h * w;
            let mut out = Vec::with_capacity(n * total_c * hw);
            for b in 0..n {
                for p in parts {
                    let pv = &nodes[p.0].value;
                    let pc = pv.shape()[1];
                    out.extend_from_slice(&pv.data()[b * pc * hw..(b + 1) * pc * hw]);
                }
            }
            Tensor::new(vec![n, total_c, h, w], out)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Softmax probability of class 1 from two-channel logits,
    /// `[N, 2, H, W] -> [N, H*W]`.
    pub fn foreground_prob(&self, logits: Var) -> Var {
        let out = {
            let lv = self.value(logits);
            let [n, c, h, w] = lv.dims4();
            assert_eq!(c, 2, "foreground_prob expects two class channels");
            let hw = h * w;
            let mut out = vec![F::zero(); n * hw];
            for b in 0..n {
                let l0 = &lv.data()[(2 * b) * hw..(2 * b + 1) * hw];
                let l1 = &lv.data()[(2 * b + 1) * hw..(2 * b + 2) * hw];
                for i in 0..hw {
                    out[b * hw + i] = sigmoid(l1[i] - l0[i]);
                }
            }
            Tensor::new(vec![n, hw], out)
        };
        let rg = self.rg(logits);
        self.push(out, Op::ForegroundProb(logits), rg)
    }

    /// `-(1/N) * sum_p w[y_p] * log softmax(logits_p)[y_p]` over all N pixels.
    pub fn weighted_cross_entropy(&self, logits: Var, target: Rc<[u8]>, weights: [F; 2]) -> Var {
        let out = {
            let lv = self.value(logits);
            let [n, c, h, w] = lv.dims4();
            assert_eq!(c, 2, "weighted_cross_entropy expects two class channels");
            let hw = h * w;
            assert_eq!(target.len(), n * hw, "target size mismatch");
            let mut total = F::zero();
            for b in 0..n {
                let l0 = &lv.data()[(2 * b) * hw..(2 * b + 1) * hw];
                let l1 = &lv.data()[(2 * b + 1) * hw..(2 * b + 2) * hw];
                let t = &target[b * hw..(b + 1) * hw];
                for i in 0..hw {
                    let d = l1[i] - l0[i];
                    // -log p1 = softplus(-d), -log p0 = softplus(d)
                    total += if t[i] == 1 {
                        weights[1] * softplus(-d)
                    } else {
                        weights[0] * softplus(d)
                    };
                }
            }
            Tensor::scalar(total / F::cast((n * hw) as f64))
        };
        let rg = self.rg(logits);
        self.push(
            out,
            Op::WeightedCe {
                logits,
                target,
                weights,
            },
            rg,
        )
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse(&self, pred: Var, target: Rc<[F]>) -> Var {
        let out = {
            let pv = self.value(pred);
            assert_eq!(pv.numel(), target.len(), "mse size mismatch");
            let s: F = pv
                .data()
                .iter()
                .zip(target.iter())
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum();
            Tensor::scalar(s / F::cast(target.len() as f64))
        };
        let rg = self.rg(pred);
        self.push(out, Op::Mse { pred, target }, rg)
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        let mut result = Gradients {
            by_var: HashMap::new(),
            by_param: HashMap::new(),
        };
        if !nodes[root.0].requires_grad {
            return result;
        }
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), F::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |v: Var, t: Tensor<F>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        match result.by_param.get_mut(&pid) {
                            Some(existing) => existing.add_assign(&g),
                            None => {
                                result.by_param.insert(pid, g.clone());
                            }
                        }
                    }
                    result.by_var.insert(id, g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = conv2d_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &g,
                        *geom,
                        nodes[x.0].requires_grad,
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let [n, c, h, w] = g.dims4();
                    let hw = h * w;
                    let count = F::cast((n * hw) as f64);
                    let gd = g.data();
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dbeta[ch] += gd[i];
                                dgamma[ch] += gd[i] * xhat[i];
                            }
                        }
                    }
                    if nodes[x.0].requires_grad {
                        let gam = nodes[gamma.0].value.data();
                        let mut dx = vec![F::zero(); gd.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                let k = gam[ch] * inv_std[ch];
                                if *batch_stats {
                                    let mb = dbeta[ch] / count;
                                    let mg = dgamma[ch] / count;
                                    for i in off..off + hw {
                                        dx[i] = k * (gd[i] - mb - xhat[i] * mg);
                                    }
                                } else {
                                    for i in off..off + hw {
                                        dx[i] = k * gd[i];
                                    }
                                }
                            }
                        }
                        acc(*x, Tensor::new(g.shape().to_vec(), dx));
                    }
                    acc(*gamma, Tensor::new(vec![c], dgamma));
                    acc(*beta, Tensor::new(vec![c], dbeta));
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value;
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                        .collect();
                    acc(*x, Tensor::new(g.shape().to_vec(), dx));
                }
                Op::Gelu(x) => {
                    let xv = &nodes[x.0].value;
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| gi * gelu_grad(xi))
                        .collect();
                    acc(*x, Tensor::new(g.shape().to_vec(), dx));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let dx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                        .collect();
                    acc(*x, Tensor::new(g.shape().to_vec(), dx));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddScaled { a, b, alpha } => {
                    let alpha = *alpha;
                    acc(*b, g.map(|v| v * alpha));
                    acc(*a, g);
                }
                Op::ScaleChannels { x, gate } => {
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gate.0].value;
                    let [_, _, h, w] = xv.dims4();
                    let hw = h * w;
                    let mut dx = g.data().to_vec();
                    let mut dgate = vec![F::zero(); gv.numel()];
                    for (i, (dchunk, xchunk)) in
                        dx.chunks_mut(hw).zip(xv.data().chunks(hw)).enumerate()
                    {
                        let gi = gv.data()[i];
                        let mut s = F::zero();
                        for (d, &xi) in dchunk.iter_mut().zip(xchunk) {
                            s += *d * xi;
                            *d *= gi;
                        }
                        dgate[i] = s;
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx));
                    acc(*gate, Tensor::new(gv.shape().to_vec(), dgate));
                }
                Op::GlobalAvgPool(x) => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let hw = xs[2] * xs[3];
                    let scale = F::cast(hw as f64).recip();
                    let mut dx = Vec::with_capacity(hw * g.numel());
                    for &gi in g.data() {
                        dx.extend(std::iter::repeat_n(gi * scale, hw));
                    }
                    acc(*x, Tensor::new(xs, dx));
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let [n, fin] = xv.dims2();
                    let fout = wv.shape()[0];
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![F::zero(); n * fin];
                        gemm(
                            n,
                            fout,
                            fin,
                            F::one(),
                            g.data(),
                            Layout::row_major(fout),
                            wv.data(),
                            Layout::row_major(fin),
                            F::zero(),
                            &mut dx,
                            Layout::row_major(fin),
                        );
                        acc(*x, Tensor::new(vec![n, fin], dx));
                    }
                    let mut dw = vec![F::zero(); fout * fin];
                    gemm(
                        fout,
                        n,
                        fin,
                        F::one(),
                        g.data(),
                        Layout::transposed(fout),
                        xv.data(),
                        Layout::row_major(fin),
                        F::zero(),
                        &mut dw,
                        Layout::row_major(fin),
                    );
                    acc(*w, Tensor::new(vec![fout, fin], dw));
                    if let Some(b) = b {
                        let mut db = vec![F::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, Tensor::new(vec![fout], db));
                    }
                }
                Op::Upsample2x(x) => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let w2 = 2 * w;
                    let mut dx = vec![F::zero(); xs.iter().product()];
                    for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                        for i in 0..h {
                            for j in 0..w {
                                let r0 = 2 * i * w2 + 2 * j;
                                let r1 = r0 + w2;
                                dplane[i * w + j] =
                                    gplane[r0] + gplane[r0 + 1] + gplane[r1] + gplane[r1 + 1];
                            }
                        }
                    }
                    acc(*x, Tensor::new(xs, dx));
                }
                Op::Concat { parts } => {
                    let [n, total_c, h, w] = g.dims4();
                    let hw = h * w;
                    let mut c0 = 0;
                    for p in parts {
                        let ps = nodes[p.0].value.shape().to_vec();
                        let pc = ps[1];
                        if nodes[p.0].requires_grad {
                            let mut dp = Vec::with_capacity(n * pc * hw);
                            for b in 0..n {
                                let start = (b * total_c + c0) * hw;
                                dp.extend_from_slice(&g.data()[start..start + pc * hw]);
                            }
                            acc(*p, Tensor::new(ps, dp));
                        }
                        c0 += pc;
                    }
                }
                Op::Reshape(x) => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    acc(*x, g.reshape(xs));
                }
                Op::ForegroundProb(logits) => {
                    let ls = nodes[logits.0].value.shape().to_vec();
                    let hw = ls[2] * ls[3];
                    let p = node.value.data();
                    let mut dl = vec![F::zero(); ls.iter().product()];
                    for b in 0..ls[0] {
                        for i in 0..hw {
                            let pi = p[b * hw + i];
                            let d = g.data()[b * hw + i] * pi * (F::one() - pi);
                            dl[(2 * b) * hw + i] = -d;
                            dl[(2 * b + 1) * hw + i] = d;
                        }
                    }
                    acc(*logits, Tensor::new(ls, dl));
                }
                Op::WeightedCe {
                    logits,
                    target,
                    weights,
                } => {
                    let lv = &nodes[logits.0].value;
                    let [n, _, h, w] = lv.dims4();
                    let hw = h * w;
                    let scale = g.item() / F::cast((n * hw) as f64);
                    let mut dl = vec![F::zero(); lv.numel()];
                    for b in 0..n {
                        for i in 0..hw {
                            let l0 = lv.data()[(2 * b) * hw + i];
                            let l1 = lv.data()[(2 * b + 1) * hw + i];
                            let p1 = sigmoid(l1 - l0);
                            let p0 = F::one() - p1;
                            let y = target[b * hw + i];
                            let wy = weights[y as usize] * scale;
                            let (t0, t1) = if y == 1 {
                                (F::zero(), F::one())
                            } else {
                                (F::one(), F::zero())
                            };
                            dl[(2 * b) * hw + i] = wy * (p0 - t0);
                            dl[(2 * b + 1) * hw + i] = wy * (p1 - t1);
                        }
                    }
                    acc(*logits, Tensor::new(lv.shape().to_vec(), dl));
                }
                Op::Mse { pred, target } => {
                    let pv = &nodes[pred.0].value;
                    let scale = g.item() * F::cast(2.0) / F::cast(target.len() as f64);
                    let dp = pv
                        .data()
                        .iter()
                        .zip(target.iter())
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    acc(*pred, Tensor::new(pv.shape().to_vec(), dp));
                }
            }
        }
        result
    }
}

#[inline]
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus<F: Float>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn gelu<F: Float>(x: F) -> F {
    let half = F::cast(0.5);
    x * half * (F::one() + (x * F::cast(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::cast(0.5);
    let cdf = half * (F::one() + (x * F::cast(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::cast(0.398_942_280_401_432_7);
    cdf + x * pdf
}

// ------------------------------------------------------------- convolution

/// Unfolds one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` patch matrix.
fn im2col<F: Float>(x: &[F], c: usize, h: usize, w: usize, geom: ConvGeometry, cols: &mut [F]) {
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding);
    let (ho, wo) = (geom.out_dim(h), geom.out_dim(w));
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                // Output columns whose input column lies inside the image.
                let ow_lo = (p.saturating_sub(kj)).div_ceil(s).min(wo);
                let ow_hi = if w + p > kj {
                    ((w + p - kj - 1) / s + 1).min(wo)
                } else {
                    0
                }
                .max(ow_lo);
                for oh in 0..ho {
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &plane[ih as usize * w..(ih as usize + 1) * w];
                    drow[..ow_lo].fill(F::zero());
                    drow[ow_hi..].fill(F::zero());
                    if s == 1 {
                        let iw0 = ow_lo + kj - p;
                        drow[ow_lo..ow_hi].copy_from_slice(&srow[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            drow[ow] = srow[ow * s + kj - p];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto `[C, H, W]`.
fn col2im<F: Float>(cols: &[F], c: usize, h: usize, w: usize, geom: ConvGeometry, x: &mut [F]) {
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding);
    let (ho, wo) = (geom.out_dim(h), geom.out_dim(w));
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let ow_lo = (p.saturating_sub(kj)).div_ceil(s).min(wo);
                let ow_hi = if w + p > kj {
                    ((w + p - kj - 1) / s + 1).min(wo)
                } else {
                    0
                }
                .max(ow_lo);
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let srow = &src[oh * wo..(oh + 1) * wo];
                    let drow = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    if s == 1 {
                        let iw0 = ow_lo + kj - p;
                        for (d, &v) in drow[iw0..iw0 + (ow_hi - ow_lo)]
                            .iter_mut()
                            .zip(&srow[ow_lo..ow_hi])
                        {
                            *d += v;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            drow[ow * s + kj - p] += srow[ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv2d_forward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    geom: ConvGeometry,
) -> Tensor<F> {
    let [n, c, h, wd] = x.dims4();
    let [cout, cin, kh, kw] = w.dims4();
    assert_eq!(c, cin, "conv2d: input has {c} channels, weight expects {cin}");
    assert!(kh == geom.kernel && kw == geom.kernel, "conv2d: kernel mismatch");
    assert!(
        h + 2 * geom.padding >= geom.kernel && wd + 2 * geom.padding >= geom.kernel,
        "conv2d: input {h}x{wd} smaller than kernel"
    );
    let (ho, wo) = (geom.out_dim(h), geom.out_dim(wd));
    let kk = cin * kh * kw;
    let mut out = vec![F::zero(); n * cout * ho * wo];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); kk * ho * wo]
    };
    for bi in 0..n {
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let ob = &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        let patches: &[F] = if geom.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, wd, geom, &mut cols);
            &cols
        };
        let beta = if let Some(b) = b {
            for (co, chunk) in ob.chunks_mut(ho * wo).enumerate() {
                chunk.fill(b.data()[co]);
            }
            F::one()
        } else {
            F::zero()
        };
        gemm(
            cout,
            kk,
            ho * wo,
            F::one(),
            w.data(),
            Layout::row_major(kk),
            patches,
            Layout::row_major(ho * wo),
            beta,
            ob,
            Layout::row_major(ho * wo),
        );
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    g: &Tensor<F>,
    geom: ConvGeometry,
    need_dx: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let [n, c, h, wd] = x.dims4();
    let [cout, cin, kh, kw] = w.dims4();
    let [_, _, ho, wo] = g.dims4();
    let kk = cin * kh * kw;
    let pointwise = geom.is_pointwise();
    let mut dw = vec![F::zero(); cout * kk];
    let mut db = vec![F::zero(); cout];
    let mut dx = need_dx.then(|| vec![F::zero(); x.numel()]);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![F::zero(); kk * ho * wo]
    };
    let mut dcols = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![F::zero(); kk * ho * wo]
    };
    for bi in 0..n {
        let xb = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let gb = &g.data()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        for (co, chunk) in gb.chunks(ho * wo).enumerate() {
            db[co] += chunk.iter().copied().sum::<F>();
        }
        let patches: &[F] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, wd, geom, &mut cols);
            &cols
        };
        gemm(
            cout,
            ho * wo,
            kk,
            F::one(),
            gb,
            Layout::row_major(ho * wo),
            patches,
            Layout::transposed(ho * wo),
            F::one(),
            &mut dw,
            Layout::row_major(kk),
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
            if pointwise {
                gemm(
                    kk,
                    cout,
                    ho * wo,
                    F::one(),
                    w.data(),
                    Layout::transposed(kk),
                    gb,
                    Layout::row_major(ho * wo),
                    F::zero(),
                    dxb,
                    Layout::row_major(ho * wo),
                );
            } else {
                gemm(
                    kk,
                    cout,
                    ho * wo,
                    F::one(),
                    w.data(),
                    Layout::transposed(kk),
                    gb,
                    Layout::row_major(ho * wo),
                    F::zero(),
                    &mut dcols,
                    Layout::row_major(ho * wo),
                );
                col2im(&dcols, c, h, wd, geom, dxb);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![cout], db),
    )
}
