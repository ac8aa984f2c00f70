//! A small reverse-mode tape over dense matrices.
//!
//! Every op stores its forward value; `backward` walks the tape once in reverse and
//! accumulates gradients only into nodes that transitively depend on a trainable
//! parameter. Frozen parameters therefore never receive a gradient slot at all.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, gemm_raw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

const RMS_EPS: f64 = 1e-6;

/// Boolean attention mask, `allowed[i * n + j]` iff row `i` may attend to column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self { n, allowed }
    }

    pub fn full(n: usize) -> Self {
        Self { n, allowed: vec![true; n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }
}

/// Precomputed rotary angles: `cos`/`sin` per row and per rotated pair.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[usize], d_head: usize, base: f64) -> Self {
        let pairs = d_head / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &p in positions {
            for k in 0..pairs {
                let freq = libm::pow(base, -2.0 * k as f64 / d_head as f64);
                let angle = p as f64 * freq;
                cos.push(libm::cos(angle));
                sin.push(libm::sin(angle));
            }
        }
        Self { pairs, cos, sin }
    }

    pub fn rows(&self) -> usize {
        if self.pairs == 0 {
            0
        } else {
            self.cos.len() / self.pairs
        }
    }
}

enum Op {
    Param(ParamId),
    Input,
    MatMul { a: NodeId, b: NodeId, b_t: bool },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    RowScale { a: NodeId, factors: Vec<f64> },
    Silu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, inv: Vec<f64> },
    Gather { a: NodeId, idx: Vec<usize> },
    GatherCols { a: NodeId, start: usize },
    ScatterAdd { base: NodeId, idx: Vec<usize>, src: NodeId },
    Assemble { parts: Vec<(Vec<usize>, NodeId)> },
    Concat(Vec<NodeId>),
    Tile { a: NodeId, times: usize },
    Rope { x: NodeId, table: Rc<RopeTable>, n_heads: usize },
    Sinusoid { points: NodeId, scale: f64 },
    Attention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize, probs: Vec<f64> },
    SoftmaxXent { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    L1 { pred: NodeId, target: Tensor, weights: Vec<f64> },
    Bce { logits: NodeId, targets: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Tape<'p> {
    /// A tape that records gradients for parameters flagged in `trainable`.
    pub fn new(store: &'p ParamStore, trainable: &'p [bool]) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self { store, trainable: Some(trainable), nodes: Vec::new(), param_nodes: vec![None; store.len()] }
    }

    /// A forward-only tape.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self { store, trainable: None, nodes: Vec::new(), param_nodes: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.store.get(pid),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let needs_grad = needs_grad && self.trainable.is_some();
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes[pid.0] {
            return id;
        }
        let needs_grad = self.trainable.map_or(false, |t| t[pid.0]);
        self.nodes.push(Node { op: Op::Param(pid), value: None, needs_grad });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[pid.0] = Some(id);
        id
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul { a, b, b_t: false }, out, ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul { a, b, b_t: true }, out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, out.cols()), "bias shape");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Op::AddRow { a, bias }, out, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn row_scale(&mut self, a: NodeId, factors: Vec<f64>) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(factors.len(), out.rows());
        for (r, f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        let ng = self.ng(a);
        self.push(Op::RowScale { a, factors }, out, ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= sigmoid(*v);
        }
        let ng = self.ng(a);
        self.push(Op::Silu(a), out, ng)
    }

    /// Row-wise RMS normalization scaled by a `1 x d` gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let d = xv.cols();
        assert_eq!(g.shape(), (1, d), "norm gain shape");
        let mut out = Tensor::zeros(xv.rows(), d);
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let s = 1.0 / libm::sqrt(ms + RMS_EPS);
            inv.push(s);
            for ((o, v), gv) in out.row_mut(r).iter_mut().zip(row).zip(g.data()) {
                *o = v * s * gv;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(Op::RmsNorm { x, gain, inv }, out, ng)
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let ng = self.ng(a);
        self.push(Op::Gather { a, idx }, out, ng)
    }

    /// Columns `start..start + width` of `a`.
    pub fn gather_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + width <= av.cols(), "column slice out of range");
        let mut out = Tensor::zeros(av.rows(), width);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        self.push(Op::GatherCols { a, start }, out, ng)
    }

    /// `base` with `src` row `i` added onto row `idx[i]`.
    pub fn scatter_add(&mut self, base: NodeId, idx: Vec<usize>, src: NodeId) -> NodeId {
        let mut out = self.value(base).clone();
        let sv = self.value(src);
        assert_eq!(sv.rows(), idx.len());
        for (i, &r) in idx.iter().enumerate() {
            for (o, s) in out.row_mut(r).iter_mut().zip(sv.row(i)) {
                *o += s;
            }
        }
        let ng = self.ng(base) || self.ng(src);
        self.push(Op::ScatterAdd { base, idx, src }, out, ng)
    }

    /// Builds a `rows x cols` matrix whose row `idx[i]` is row `i` of the matching part.
    /// Rows covered by no part are zero.
    pub fn assemble(&mut self, rows: usize, cols: usize, parts: Vec<(Vec<usize>, NodeId)>) -> NodeId {
        let mut out = Tensor::zeros(rows, cols);
        let mut ng = false;
        for (idx, src) in &parts {
            let sv = self.value(*src);
            assert_eq!(sv.rows(), idx.len());
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(sv.row(i));
            }
            ng |= self.ng(*src);
        }
        self.push(Op::Assemble { parts }, out, ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
            ng |= self.ng(p);
        }
        self.push(Op::Concat(parts), Tensor::from_vec(rows, cols, data), ng)
    }

    /// Repeats the columns of `a` `times` times side by side.
    pub fn tile_cols(&mut self, a: NodeId, times: usize) -> NodeId {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(av.rows(), c * times);
        for r in 0..av.rows() {
            for t in 0..times {
                out.row_mut(r)[t * c..(t + 1) * c].copy_from_slice(av.row(r));
            }
        }
        let ng = self.ng(a);
        self.push(Op::Tile { a, times }, out, ng)
    }

    pub fn rope(&mut self, x: NodeId, table: Rc<RopeTable>, n_heads: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(table.rows(), xv.rows(), "rope table rows");
        let out = rope_forward(xv, &table, n_heads, false);
        let ng = self.ng(x);
        self.push(Op::Rope { x, table, n_heads }, out, ng)
    }

    /// Sinusoidal encoding of `n x 2` points into `n x width` features.
    pub fn sinusoid(&mut self, points: NodeId, scale: f64, width: usize) -> NodeId {
        let pv = self.value(points);
        assert_eq!(pv.cols(), 2, "points must be n x 2");
        let mut out = Tensor::zeros(pv.rows(), width);
        for r in 0..pv.rows() {
            let p = [pv.get(r, 0) / scale, pv.get(r, 1) / scale];
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                let (coord, freq, is_cos) = sinusoid_slot(j, width);
                let a = freq * p[coord];
                *o = if is_cos { libm::cos(a) } else { libm::sin(a) };
            }
        }
        let ng = self.ng(points);
        self.push(Op::Sinusoid { points, scale }, out, ng)
    }

    /// Multi-head scaled dot-product attention under `mask`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: Rc<AttnMask>, n_heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d));
        assert_eq!(vv.shape(), (n, d));
        assert_eq!(mask.n, n, "mask size");
        let dh = d / n_heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; n_heads * n * n];
        let mut out = Tensor::zeros(n, d);
        for h in 0..n_heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            let off = h * dh;
            gemm_raw(n, dh, n, &qv.data()[off..], d as isize, 1, &kv.data()[off..], 1, d as isize, p, n as isize, 0.0);
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.get(i, j) {
                        *s *= scale;
                        max = max.max(*s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|s| *s = 0.0);
                    continue;
                }
                let mut sum = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.get(i, j) {
                        *s = libm::exp(*s - max);
                        sum += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            gemm_raw(n, n, dh, p, n as isize, 1, &vv.data()[off..], d as isize, 1, &mut out.data_mut()[off..], d as isize, 0.0);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(Op::Attention { q, k, v, n_heads, probs }, out, ng)
    }

    /// `sum_r w_r * CE(logits_r, target_r)` as a `1 x 1` node.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>, weights: Vec<f64>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows());
        assert_eq!(weights.len(), lv.rows());
        let c = lv.cols();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for (j, p) in probs[r * c..(r + 1) * c].iter_mut().enumerate() {
                *p = libm::exp(row[j] - lse);
            }
            total += weights[r] * (lse - row[targets[r]]);
        }
        let ng = self.ng(logits);
        self.push(Op::SoftmaxXent { logits, targets, weights, probs }, Tensor::filled(1, 1, total), ng)
    }

    /// `sum_r w_r * sum_c |pred - target|` as a `1 x 1` node.
    pub fn l1(&mut self, pred: NodeId, target: Tensor, weights: Vec<f64>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "l1 target shape");
        assert_eq!(weights.len(), pv.rows());
        let mut total = 0.0;
        for r in 0..pv.rows() {
            let s: f64 = pv.row(r).iter().zip(target.row(r)).map(|(a, b)| libm::fabs(a - b)).sum();
            total += weights[r] * s;
        }
        let ng = self.ng(pred);
        self.push(Op::L1 { pred, target, weights }, Tensor::filled(1, 1, total), ng)
    }

    /// `sum_r w_r * BCE(sigmoid(x_r), t_r)` over an `n x 1` logit column.
    pub fn bce_logits(&mut self, logits: NodeId, targets: Vec<f64>, weights: Vec<f64>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.cols(), 1);
        assert_eq!(targets.len(), lv.rows());
        let total: f64 = lv
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&x, &t), &w)| w * (x.max(0.0) - x * t + libm::log1p(libm::exp(-libm::fabs(x)))))
            .sum();
        let ng = self.ng(logits);
        self.push(Op::Bce { logits, targets, weights }, Tensor::filled(1, 1, total), ng)
    }

    /// Sum of `1 x 1` nodes.
    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Gradients of the `1 x 1` node `root` with respect to every trainable parameter.
    pub fn backward(&self, root: NodeId) -> Grads {
        let mut grads = Grads::new(self.store.len());
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        if !self.ng(root) {
            return grads;
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(pid) => grads.accumulate_owned(*pid, g),
                Op::Input => {}
                Op::MatMul { a, b, b_t } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut ga = Tensor::zeros(av.rows(), av.cols());
                        // a*b: dA = G b^T ; a*b^T: dA = G b
                        gemm(&g, false, bv, !*b_t, &mut ga, 0.0);
                        acc(&mut adj, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                        if *b_t {
                            gemm(&g, true, av, false, &mut gb, 0.0);
                        } else {
                            gemm(av, true, &g, false, &mut gb, 0.0);
                        }
                        acc(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut adj, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut adj, *a, g);
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.ng(*bias) {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut adj, *bias, gb);
                    }
                    if self.ng(*a) {
                        acc(&mut adj, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    acc(&mut adj, *a, g);
                }
                Op::RowScale { a, factors } => {
                    let mut g = g;
                    for (r, f) in factors.iter().enumerate() {
                        for v in g.row_mut(r) {
                            *v *= f;
                        }
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let mut g = g;
                    for (gv, &x) in g.data_mut().iter_mut().zip(av.data()) {
                        let s = sigmoid(x);
                        *gv *= s * (1.0 + x * (1.0 - s));
                    }
                    acc(&mut adj, *a, g);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let xv = self.value(*x);
                    let gn = self.value(*gain);
                    let d = xv.cols();
                    if self.ng(*gain) {
                        let mut gg = Tensor::zeros(1, d);
                        for r in 0..xv.rows() {
                            for j in 0..d {
                                gg.data_mut()[j] += g.get(r, j) * xv.get(r, j) * inv[r];
                            }
                        }
                        acc(&mut adj, *gain, gg);
                    }
                    if self.ng(*x) {
                        let mut gx = Tensor::zeros(xv.rows(), d);
                        for r in 0..xv.rows() {
                            let s = inv[r];
                            let dot: f64 = (0..d).map(|j| g.get(r, j) * gn.data()[j] * xv.get(r, j)).sum();
                            let k = s * s * s * dot / d as f64;
                            for j in 0..d {
                                gx.set(r, j, s * gn.data()[j] * g.get(r, j) - k * xv.get(r, j));
                            }
                        }
                        acc(&mut adj, *x, gx);
                    }
                }
                Op::GatherCols { a, start } => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Gather { a, idx } => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ScatterAdd { base, idx, src } => {
                    if self.ng(*src) {
                        let mut gs = Tensor::zeros(idx.len(), g.cols());
                        for (i, &r) in idx.iter().enumerate() {
                            gs.row_mut(i).copy_from_slice(g.row(r));
                        }
                        acc(&mut adj, *src, gs);
                    }
                    if self.ng(*base) {
                        acc(&mut adj, *base, g);
                    }
                }
                Op::Assemble { parts } => {
                    for (idx, src) in parts {
                        if !self.ng(*src) {
                            continue;
                        }
                        let mut gs = Tensor::zeros(idx.len(), g.cols());
                        for (i, &r) in idx.iter().enumerate() {
                            gs.row_mut(i).copy_from_slice(g.row(r));
                        }
                        acc(&mut adj, *src, gs);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.ng(p) {
                            let cols = g.cols();
                            let slice = g.data()[start * cols..(start + rows) * cols].to_vec();
                            acc(&mut adj, p, Tensor::from_vec(rows, cols, slice));
                        }
                        start += rows;
                    }
                }
                Op::Tile { a, times } => {
                    let c = g.cols() / times;
                    let mut ga = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        for t in 0..*times {
                            for j in 0..c {
                                ga.row_mut(r)[j] += g.get(r, t * c + j);
                            }
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Rope { x, table, n_heads } => {
                    let gx = rope_forward(&g, table, *n_heads, true);
                    acc(&mut adj, *x, gx);
                }
                Op::Sinusoid { points, scale } => {
                    let pv = self.value(*points);
                    let out = node.value.as_ref().expect("sinusoid value");
                    let width = out.cols();
                    let mut gp = Tensor::zeros(pv.rows(), 2);
                    for r in 0..pv.rows() {
                        let p = [pv.get(r, 0) / scale, pv.get(r, 1) / scale];
                        for j in 0..width {
                            let (coord, freq, is_cos) = sinusoid_slot(j, width);
                            let a = freq * p[coord];
                            let d = if is_cos { -libm::sin(a) } else { libm::cos(a) };
                            gp.row_mut(r)[coord] += g.get(r, j) * d * freq / scale;
                        }
                    }
                    acc(&mut adj, *points, gp);
                }
                Op::Attention { q, k, v, n_heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / n_heads;
                    let scale = 1.0 / libm::sqrt(dh as f64);
                    let mut gq = Tensor::zeros(n, d);
                    let mut gk = Tensor::zeros(n, d);
                    let mut gv = Tensor::zeros(n, d);
                    let mut dp = vec![0.0; n * n];
                    for h in 0..*n_heads {
                        let p = &probs[h * n * n..(h + 1) * n * n];
                        let off = h * dh;
                        // dV = P^T dO
                        gemm_raw(n, n, dh, p, 1, n as isize, &g.data()[off..], d as isize, 1, &mut gv.data_mut()[off..], d as isize, 0.0);
                        // dP = dO V^T
                        gemm_raw(n, dh, n, &g.data()[off..], d as isize, 1, &vv.data()[off..], 1, d as isize, &mut dp, n as isize, 0.0);
                        for i in 0..n {
                            let pr = &p[i * n..(i + 1) * n];
                            let dr = &mut dp[i * n..(i + 1) * n];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (dv, pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        // dQ = dS K ; dK = dS^T Q
                        gemm_raw(n, n, dh, &dp, n as isize, 1, &kv.data()[off..], d as isize, 1, &mut gq.data_mut()[off..], d as isize, 0.0);
                        gemm_raw(n, n, dh, &dp, 1, n as isize, &qv.data()[off..], d as isize, 1, &mut gk.data_mut()[off..], d as isize, 0.0);
                    }
                    if self.ng(*q) {
                        acc(&mut adj, *q, gq);
                    }
                    if self.ng(*k) {
                        acc(&mut adj, *k, gk);
                    }
                    if self.ng(*v) {
                        acc(&mut adj, *v, gv);
                    }
                }
                Op::SoftmaxXent { logits, targets, weights, probs } => {
                    let s = g.scalar();
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let mut gl = Tensor::from_vec(lv.rows(), c, probs.clone());
                    for r in 0..lv.rows() {
                        gl.row_mut(r)[targets[r]] -= 1.0;
                        let w = weights[r] * s;
                        for v in gl.row_mut(r) {
                            *v *= w;
                        }
                    }
                    acc(&mut adj, *logits, gl);
                }
                Op::L1 { pred, target, weights } => {
                    let s = g.scalar();
                    let pv = self.value(*pred);
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        for j in 0..pv.cols() {
                            let diff = pv.get(r, j) - target.get(r, j);
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            gp.set(r, j, s * weights[r] * sign);
                        }
                    }
                    acc(&mut adj, *pred, gp);
                }
                Op::Bce { logits, targets, weights } => {
                    let s = g.scalar();
                    let lv = self.value(*logits);
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&x, &t), &w)| s * w * (sigmoid(x) - t))
                        .collect();
                    acc(&mut adj, *logits, Tensor::from_vec(lv.rows(), 1, data));
                }
            }
        }
        grads
    }
}

fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Layout of slot `j` in a sinusoid of `width`: (coordinate, frequency, is_cos).
/// The first half encodes x and the second half y; within a half, slots alternate
/// sin/cos over octave frequencies 1, 2, 4, ...
#[inline]
pub(crate) fn sinusoid_slot(j: usize, width: usize) -> (usize, f64, bool) {
    let half = width / 2;
    let (coord, k) = if j < half { (0, j) } else { (1, j - half) };
    let freq = libm::ldexp(1.0, (k / 2) as i32);
    (coord, freq, k % 2 == 1)
}

pub(crate) fn rope_forward(x: &Tensor, table: &RopeTable, n_heads: usize, inverse: bool) -> Tensor {
    let d = x.cols();
    let dh = d / n_heads;
    let pairs = table.pairs;
    debug_assert_eq!(pairs, dh / 2);
    let mut out = Tensor::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let cs = &table.cos[r * pairs..(r + 1) * pairs];
        let sn = &table.sin[r * pairs..(r + 1) * pairs];
        let src = x.row(r);
        let dst = out.row_mut(r);
        for h in 0..n_heads {
            for k in 0..pairs {
                let i0 = h * dh + 2 * k;
                let (c, s) = (cs[k], if inverse { -sn[k] } else { sn[k] });
                let (a, b) = (src[i0], src[i0 + 1]);
                dst[i0] = a * c - b * s;
                dst[i0 + 1] = a * s + b * c;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Exercises every op in one scalar function.
    fn composite(t: &mut Tape, ids: &[ParamId]) -> NodeId {
        let x = t.param(ids[0]);
        let w = t.param(ids[1]);
        let gain = t.param(ids[2]);
        let bias = t.param(ids[3]);
        let pts = t.param(ids[4]);
        let n = 5;
        let h = t.rms_norm(x, gain);
        let q = t.matmul(h, w);
        let table = Rc::new(RopeTable::new(&[0, 1, 2, 3, 4], 4, 10000.0));
        let q = t.rope(q, table, 2);
        let e = t.sinusoid(pts, 2.0, 4);
        let e = t.tile_cols(e, 2);
        let q = t.add(q, e);
        let k = t.matmul_nt(h, w);
        let v = t.add_row(h, bias);
        let att = t.attention(q, k, v, Rc::new(AttnMask::causal(n)), 2);
        let att = t.row_scale(att, vec![1.0, 0.0, 0.5, 1.0, 2.0]);
        let s = t.silu(att);
        let g = t.gather(s, vec![4, 1, 4]);
        let sa = t.scatter_add(s, vec![0, 2, 3], g);
        let top = t.gather(sa, vec![0, 1]);
        let bottom = t.gather(sa, vec![2, 3, 4]);
        let c = t.concat_rows(vec![bottom, top]);
        let asm = t.assemble(5, 8, vec![(vec![4, 0], top), (vec![1, 2, 3], bottom)]);
        let c = t.add(c, asm);
        let c = t.scale(c, 0.7);
        let xe = t.softmax_xent(c, vec![0, 3, 7, 1, 2], vec![1.0, 0.1, 1.0, 0.5, 1.0]);
        let col = t.gather(c, vec![0, 1, 2]);
        let col = t.matmul(col, w);
        let col = t.gather_cols(col, 2, 5);
        let l1 = t.l1(col, Tensor::zeros(3, 5), vec![1.0, 2.0, 0.5]);
        let logit_col = t.matmul_nt(c, bias);
        let b = t.bce_logits(logit_col, vec![1.0, 0.0, 1.0, 0.0, 1.0], vec![1.0; 5]);
        t.sum_scalars(&[xe, l1, b])
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids = [
            store.insert("x", ParamGroup::DeepBase, random(&mut rng, 5, 8)),
            store.insert("w", ParamGroup::DeepBase, random(&mut rng, 8, 8)),
            store.insert("gain", ParamGroup::DeepBase, random(&mut rng, 1, 8)),
            store.insert("bias", ParamGroup::DeepBase, random(&mut rng, 1, 8)),
            store.insert("pts", ParamGroup::DeepBase, random(&mut rng, 5, 2)),
        ];
        let trainable = vec![true; store.len()];
        let grads = {
            let mut t = Tape::new(&store, &trainable);
            let root = composite(&mut t, &ids);
            t.backward(root)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for &id in &ids {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                let eval = |v: f64, store: &mut ParamStore| {
                    store.get_mut(id).data_mut()[i] = v;
                    let mut t = Tape::inference(store);
                    let root = composite(&mut t, &ids);
                    t.value(root).scalar()
                };
                let fp = eval(orig + h, &mut store);
                let fm = eval(orig - h, &mut store);
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.insert("a", ParamGroup::DetHead, random(&mut rng, 2, 3));
        let b = store.insert("b", ParamGroup::PlanHead, random(&mut rng, 3, 2));
        let trainable = store.mask_for(&[ParamGroup::PlanHead]);
        let mut t = Tape::new(&store, &trainable);
        let (an, bn) = (t.param(a), t.param(b));
        let y = t.matmul(an, bn);
        let l = t.l1(y, Tensor::zeros(2, 2), vec![1.0, 1.0]);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn fully_masked_row_attends_to_nothing() {
        let store = ParamStore::new();
        let mut t = Tape::inference(&store);
        let x = t.input(Tensor::filled(2, 2, 1.0));
        let mask = AttnMask { n: 2, allowed: vec![false, false, true, true] };
        let o = t.attention(x, x, x, Rc::new(mask), 1);
        assert_eq!(t.value(o).row(0), &[0.0, 0.0]);
        assert_eq!(t.value(o).row(1), &[1.0, 1.0]);
    }
}
