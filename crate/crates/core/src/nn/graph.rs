use std::collections::{BTreeMap, HashMap};

use super::kernels::{col2im, gemm, im2col};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::exec;

pub const BN_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphMode {
    /// Batch norm uses batch statistics and records running-stat updates.
    pub training: bool,
    /// Every node, inputs included, carries a gradient.
    pub track_all: bool,
    /// Accumulate gradients for trainable parameters.
    pub param_grads: bool,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    /// Values per channel the statistics were taken over.
    pub count: usize,
}

enum Op {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        k: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        batch_stats: bool,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Operations evaluate eagerly; [`Graph::backward`]
/// replays the tape in reverse.
pub struct Graph<'p> {
    store: &'p ParamStore,
    mode: GraphMode,
    nodes: Vec<Node>,
    tags: Vec<(String, NodeId)>,
    overrides: HashMap<String, Tensor>,
    bn_updates: Vec<BnUpdate>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Vec<f64>> {
        &self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: GraphMode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            tags: Vec::new(),
            overrides: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Training pass: batch statistics and parameter gradients.
    pub fn training(store: &'p ParamStore) -> Self {
        Self::new(
            store,
            GraphMode {
                training: true,
                track_all: false,
                param_grads: true,
            },
        )
    }

    /// Forward pass with batch statistics but no gradients, for
    /// re-estimating batch-norm running statistics.
    pub fn statistics(store: &'p ParamStore) -> Self {
        Self::new(
            store,
            GraphMode {
                training: true,
                track_all: false,
                param_grads: false,
            },
        )
    }

    /// Inference pass: running statistics, no gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::new(
            store,
            GraphMode {
                training: false,
                track_all: false,
                param_grads: false,
            },
        )
    }

    /// Inference pass that still propagates gradients to every node, for
    /// attribution methods.
    pub fn explain(store: &'p ParamStore) -> Self {
        Self::new(
            store,
            GraphMode {
                training: false,
                track_all: true,
                param_grads: false,
            },
        )
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Replace the value of the node tagged `name` with `value` on the next
    /// forward pass through this graph.
    pub fn set_override(&mut self, name: impl Into<String>, value: Tensor) {
        self.overrides.insert(name.into(), value);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of f64 values held by the tape.
    pub fn activation_len(&self) -> usize {
        self.nodes.iter().map(|n| n.value.data().len()).sum()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }

    /// Names `node`, making it addressable by [`Graph::tagged`]. If an
    /// override is registered for `name` the returned node carries the
    /// override instead, so downstream operations see the substituted value.
    pub fn tag(&mut self, name: &str, node: NodeId) -> NodeId {
        let id = match self.overrides.get(name) {
            Some(v) => {
                debug_assert_eq!(v.shape(), self.value(node).shape());
                let v = v.clone();
                self.push(v, Op::Input, true)
            }
            None => node,
        };
        self.tags.push((name.to_string(), id));
        id
    }

    pub fn tagged(&self, name: &str) -> Option<NodeId> {
        self.tags.iter().rev().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn tag_names(&self) -> Vec<String> {
        self.tags.iter().map(|(n, _)| n.clone()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn wants_param(&self, id: ParamId) -> bool {
        self.mode.param_grads && self.store.is_trainable(id)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let rg = self.mode.track_all;
        self.push(value, Op::Input, rg)
    }

    /// Stride-1 convolution with zero "same" padding. `w` has shape
    /// `[cout, cin, k, k]`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let wp = self.store.get(w);
        let (cout, cin, k) = (wp.shape[0], wp.shape[1], wp.shape[2]);
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.c(), cin, "conv `{}` input channels", wp.name);
        let [n, _, h, wd] = xv.shape();
        let hw = h * wd;
        let mut out = Tensor::zeros([n, cout, h, wd]);
        let weights = &wp.data;
        let bias = b.map(|b| self.store.data(b));
        let xdata = xv.data();
        exec::for_each_chunk_mut(out.data_mut(), cout * hw, |i, o| {
            let xs = &xdata[i * cin * hw..(i + 1) * cin * hw];
            if k == 1 {
                gemm(cout, cin, hw, weights, false, xs, false, 0.0, o);
            } else {
                let mut cols = vec![0.0; cin * k * k * hw];
                im2col(xs, cin, h, wd, k, &mut cols);
                gemm(cout, cin * k * k, hw, weights, false, &cols, false, 0.0, o);
            }
            if let Some(bias) = bias {
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let rg = self.rg(x) || self.wants_param(w) || b.is_some_and(|b| self.wants_param(b));
        self.push(out, Op::Conv { x, w, b, k }, rg)
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// Batch statistics are used only when the graph is in training mode
    /// and the scale parameter is trainable; a frozen layer normalizes with
    /// its running statistics and records no update.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    ) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let batch_stats = self.mode.training && self.store.is_trainable(gamma);
        let (mu, var_b) = if batch_stats {
            let stats = exec::map_range(c, |ch| {
                let mut s = 0.0;
                for i in 0..n {
                    s += xv.plane(i, ch).iter().sum::<f64>();
                }
                let mu = s / m;
                let mut v = 0.0;
                for i in 0..n {
                    v += xv.plane(i, ch).iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                }
                (mu, v / m)
            });
            stats.into_iter().unzip()
        } else {
            (
                self.store.data(mean).to_vec(),
                self.store.data(var).to_vec(),
            )
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.store.data(gamma);
        let bt = self.store.data(beta);
        let mut xhat = vec![0.0; xv.data().len()];
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let src = xv.plane(i, ch);
                let xh = &mut xhat[off..off + hw];
                let o = &mut out.data_mut()[off..off + hw];
                for j in 0..hw {
                    let v = (src[j] - mu[ch]) * inv_std[ch];
                    xh[j] = v;
                    o[j] = g[ch] * v + bt[ch];
                }
            }
        }
        if batch_stats {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                mean,
                var,
                batch_mean: mu,
                batch_var: var_b.iter().map(|v| v * unbias).collect(),
                count: n * hw,
            });
        }
        let rg = self.rg(x) || self.wants_param(gamma) || self.wants_param(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch_stats,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for (p, (o, a)) in out
            .data_mut()
            .chunks_mut(oh * ow)
            .zip(argmax.chunks_mut(oh * ow))
            .enumerate()
        {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                    o[y * ow + xx] = best;
                    a[y * ow + xx] = best_i as u32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (p, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    o[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (p, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    o[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let [n, _, h, w] = self.value(xs[0]).shape();
        let c: usize = xs.iter().map(|&x| self.value(x).c()).sum();
        let hw = h * w;
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut off = 0;
        for &x in xs {
            let xv = self.value(x);
            assert_eq!([xv.n(), xv.h(), xv.w()], [n, h, w], "concat spatial dims");
            let cx = xv.c();
            for i in 0..n {
                let dst = (i * c + off) * hw;
                out.data_mut()[dst..dst + cx * hw].copy_from_slice(xv.sample(i));
            }
            off += cx;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape());
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, y)| *x *= y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let z = (h * w) as f64;
        let data = xv
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / z)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Dense layer on `[n, c, 1, 1]` inputs; `w` has shape `[out, c]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let wp = self.store.get(w);
        let (fo, fi) = (wp.shape[0], wp.shape[1]);
        let xv = self.value(x);
        assert_eq!(xv.sample_len(), fi, "linear `{}` fan-in", wp.name);
        let n = xv.n();
        let mut out = Tensor::zeros([n, fo, 1, 1]);
        gemm(n, fi, fo, xv.data(), false, &wp.data, true, 0.0, out.data_mut());
        if let Some(b) = b {
            let bias = self.store.data(b);
            for row in out.data_mut().chunks_mut(fo) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let rg = self.rg(x) || self.wants_param(w) || b.is_some_and(|b| self.wants_param(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Back-propagates `seeds` (node, dL/dnode) through the tape. Gradients
    /// of intermediate nodes are released as soon as they have been
    /// consumed, except for the nodes listed in `keep`.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>, keep: &[NodeId]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (id, g) in seeds {
            accumulate(&mut grads, id, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            let Some(gy) = (if keep.contains(&NodeId(idx)) {
                grads[idx].clone()
            } else {
                grads[idx].take()
            }) else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads, &mut params);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backward_node(
        &self,
        node: &Node,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<ParamId, Vec<f64>>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Conv { x, w, b, k } => self.backward_conv(*x, *w, *b, *k, gy, grads, params),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch_stats,
                xhat,
                inv_std,
            } => {
                let [n, c, h, wd] = gy.shape();
                let hw = h * wd;
                let m = (n * hw) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        let g = &gy.data()[off..off + hw];
                        let xh = &xhat[off..off + hw];
                        sum_dy[ch] += g.iter().sum::<f64>();
                        sum_dy_xhat[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.wants_param(*gamma) {
                    accumulate_param(params, *gamma, &sum_dy_xhat);
                }
                if self.wants_param(*beta) {
                    accumulate_param(params, *beta, &sum_dy);
                }
                if self.rg(*x) {
                    let gm = self.store.data(*gamma);
                    let mut dx = Tensor::zeros(gy.shape());
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            let g = &gy.data()[off..off + hw];
                            let xh = &xhat[off..off + hw];
                            let d = &mut dx.data_mut()[off..off + hw];
                            let scale = gm[ch] * inv_std[ch];
                            if *batch_stats {
                                let (sd, sdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                                for j in 0..hw {
                                    d[j] = scale * (g[j] - sd - xh[j] * sdx);
                                }
                            } else {
                                for j in 0..hw {
                                    d[j] = scale * g[j];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(d, y)| {
                            if *y <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(d, y)| *d *= y * (1.0 - y));
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let ohw = gy.plane_len();
                    let mut dx = Tensor::zeros(xs);
                    for (p, (g, a)) in gy.data().chunks(ohw).zip(argmax.chunks(ohw)).enumerate() {
                        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for (gv, &ai) in g.iter().zip(a) {
                            d[ai as usize] += gv;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool2(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros(xs);
                    for (p, g) in gy.data().chunks(oh * ow).enumerate() {
                        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * g[y * ow + xx];
                                let i = 2 * y * w + 2 * xx;
                                d[i] += v;
                                d[i + 1] += v;
                                d[i + w] += v;
                                d[i + w + 1] += v;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Upsample2(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let ow = 2 * w;
                    let mut dx = Tensor::zeros(xs);
                    for (p, g) in gy.data().chunks(4 * h * w).enumerate() {
                        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..ow {
                                d[(y / 2) * w + xx / 2] += g[y * ow + xx];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat(xs) => {
                let [n, c, h, w] = gy.shape();
                let hw = h * w;
                let mut off = 0;
                for &x in xs {
                    let xsh = self.value(x).shape();
                    let cx = xsh[1];
                    if self.rg(x) {
                        let mut dx = Tensor::zeros(xsh);
                        for i in 0..n {
                            let src = (i * c + off) * hw;
                            dx.data_mut()[i * cx * hw..(i + 1) * cx * hw]
                                .copy_from_slice(&gy.data()[src..src + cx * hw]);
                        }
                        accumulate(grads, x, dx);
                    }
                    off += cx;
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut da = gy.clone();
                    da.data_mut()
                        .iter_mut()
                        .zip(self.value(*b).data())
                        .for_each(|(d, v)| *d *= v);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = gy.clone();
                    db.data_mut()
                        .iter_mut()
                        .zip(self.value(*a).data())
                        .for_each(|(d, v)| *d *= v);
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    dx.data_mut().iter_mut().for_each(|d| *d *= s);
                    accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let z = hw as f64;
                    let mut dx = Tensor::zeros(xs);
                    for (d, g) in dx.data_mut().chunks_mut(hw).zip(gy.data()) {
                        d.fill(g / z);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let n = xv.n();
                let fi = xv.sample_len();
                let fo = gy.c();
                if self.wants_param(*w) {
                    let mut dw = vec![0.0; fo * fi];
                    gemm(fo, n, fi, gy.data(), true, xv.data(), false, 0.0, &mut dw);
                    accumulate_param(params, *w, &dw);
                }
                if let Some(b) = b.filter(|b| self.wants_param(*b)) {
                    let mut db = vec![0.0; fo];
                    for row in gy.data().chunks(fo) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate_param(params, b, &db);
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(n, fo, fi, gy.data(), false, self.store.data(*w), false, 0.0, dx.data_mut());
                    accumulate(grads, *x, dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        k: usize,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<ParamId, Vec<f64>>,
    ) {
        let xv = self.value(x);
        let [n, cin, h, wd] = xv.shape();
        let cout = gy.c();
        let hw = h * wd;
        let kk = cin * k * k;
        let need_w = self.wants_param(w);
        let need_x = self.rg(x);
        let weights = self.store.data(w);
        let per_sample = exec::map_range(n, |i| {
            let xs = xv.sample(i);
            let g = gy.sample(i);
            let mut cols_buf = Vec::new();
            let cols: &[f64] = if k == 1 {
                xs
            } else if need_w {
                cols_buf = vec![0.0; kk * hw];
                im2col(xs, cin, h, wd, k, &mut cols_buf);
                &cols_buf
            } else {
                &[]
            };
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; cout * kk];
                gemm(cout, hw, kk, g, false, cols, true, 0.0, &mut dw);
                dw
            });
            let dx = need_x.then(|| {
                let mut dx = vec![0.0; cin * hw];
                if k == 1 {
                    gemm(cin, cout, hw, weights, true, g, false, 0.0, &mut dx);
                } else {
                    let mut dcols = cols_buf;
                    dcols.resize(kk * hw, 0.0);
                    gemm(kk, cout, hw, weights, true, g, false, 0.0, &mut dcols);
                    col2im(&dcols, cin, h, wd, k, &mut dx);
                }
                dx
            });
            (dw, dx)
        });
        if need_w {
            let mut dw = vec![0.0; cout * kk];
            for (s, _) in &per_sample {
                dw.iter_mut()
                    .zip(s.as_ref().expect("weight grad"))
                    .for_each(|(a, b)| *a += b);
            }
            accumulate_param(params, w, &dw);
        }
        if let Some(b) = b.filter(|b| self.wants_param(*b)) {
            let mut db = vec![0.0; cout];
            for i in 0..n {
                for (co, plane) in gy.sample(i).chunks(hw).enumerate() {
                    db[co] += plane.iter().sum::<f64>();
                }
            }
            accumulate_param(params, b, &db);
        }
        if need_x {
            let mut data = Vec::with_capacity(n * cin * hw);
            for (_, dx) in per_sample {
                data.extend(dx.expect("input grad"));
            }
            accumulate(grads, x, Tensor::from_vec(xv.shape(), data).expect("conv dx shape"));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_param(params: &mut BTreeMap<ParamId, Vec<f64>>, id: ParamId, g: &[f64]) {
    params
        .entry(id)
        .and_modify(|acc| acc.iter_mut().zip(g).for_each(|(a, b)| *a += b))
        .or_insert_with(|| g.to_vec());
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
