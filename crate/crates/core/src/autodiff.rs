//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse creation order, which is a
//! valid reverse topological order because a node can only reference nodes
//! created before it. Gradients are accumulated in that fixed order, so a
//! given graph always produces bit-identical gradients.
//!
//! Operations work on the trailing axis ("rows" of width `last_dim`) unless
//! documented otherwise. Attention is a single fused node: scores, softmax and
//! the value mix are recorded together so that the tape stays short.

use crate::error::{Error, Result};
use crate::tensor::{MatmulPlan, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Detach,
    MatMul {
        a: NodeId,
        b: NodeId,
        plan: MatmulPlan,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        x: NodeId,
        y: NodeId,
    },
    Affine {
        x: NodeId,
        scale: f64,
    },
    Sum {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    LogSoftmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Ln {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    AddRowsAt {
        base: NodeId,
        inc: NodeId,
        offset: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        geom: AttnGeom,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    groups: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    dim: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph confined to one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    inference: bool,
    attention_pairs: u64,
}

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which parameters are recorded as constants, so nothing is
    /// differentiated.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Query-key pairs scored by all attention nodes so far (shared across
    /// heads, so counted once per pair).
    pub fn attention_pairs(&self) -> u64 {
        self.attention_pairs
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let requires_grad = !self.inference;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `id`; zeros when the node
    /// was not reached.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    pub fn take_grad(&mut self, id: NodeId) -> Tensor {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    /// Stops gradient flow: the result is a constant copy of `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let plan = MatmulPlan::new(self.value(a).shape(), self.value(b).shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::from_vec(&plan.out_shape, out);
        Ok(self.push(value, Op::MatMul { a, b, plan }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// `x + y` where `y` is repeated over the leading part of `x`; `y`'s shape
    /// must equal a suffix of `x`'s shape (a bias row, a position table...).
    pub fn add_broadcast(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (vx, vy) = (self.value(x), self.value(y));
        let (sx, sy) = (vx.shape(), vy.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(mismatch("add_broadcast", vx, vy));
        }
        let ly = vy.numel();
        let mut value = vx.clone();
        for chunk in value.data_mut().chunks_mut(ly) {
            for (a, b) in chunk.iter_mut().zip(vy.data()) {
                *a += b;
            }
        }
        Ok(self.push(value, Op::AddBroadcast { x, y }, &[x, y]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let value = Tensor::from_vec(vx.shape(), softmax_rows(vx.data(), vx.last_dim()));
        self.push(value, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let value = Tensor::from_vec(vx.shape(), log_softmax_rows(vx.data(), vx.last_dim()));
        self.push(value, Op::LogSoftmax { x }, &[x])
    }

    /// Layer normalization over the last axis with `eps = 1e-6`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch("layer_norm", vx, vg));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let src = &vx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (src[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::from_vec(vx.shape(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Ln { x }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: vx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = vx.t();
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    /// Concatenates matrices along their first axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]);
        let d = first.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.last_dim() != d {
                return Err(mismatch("concat_rows", first, v));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(&[rows, d], data);
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Rows `start..start + len` of a tensor viewed as `[rows, last_dim]`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if start + len > vx.rows() {
            return Err(Error::Range {
                what: "row slice end",
                value: start + len,
                lo: 0,
                hi: vx.rows(),
            });
        }
        let value = Tensor::from_vec(&[len, d], vx.data()[start * d..(start + len) * d].to_vec());
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// `base` with `inc` added into rows `offset..offset + inc.rows`.
    pub fn add_rows_at(&mut self, base: NodeId, inc: NodeId, offset: usize) -> Result<NodeId> {
        let (vb, vi) = (self.value(base), self.value(inc));
        let d = vb.last_dim();
        if vi.last_dim() != d || offset + vi.rows() > vb.rows() {
            return Err(mismatch("add_rows_at", vb, vi));
        }
        let mut value = vb.clone();
        for (a, b) in value.data_mut()[offset * d..].iter_mut().zip(vi.data()) {
            *a += b;
        }
        Ok(self.push(value, Op::AddRowsAt { base, inc, offset }, &[base, inc]))
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `[G, T, D]` (or `[T, D]`), `k` and `v` are `[G, S, D]` (or
    /// `[S, D]`). Each of the `G` groups attends only within itself; heads
    /// split `D` into equal contiguous slices. Returns the mixed values, shaped
    /// like `q`; the probabilities `[G, heads, T, S]` are available through
    /// [`Graph::attention_probs`].
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let as3 = |t: &Tensor| -> Option<(usize, usize, usize)> {
            match *t.shape() {
                [a, b] => Some((1, a, b)),
                [g, a, b] => Some((g, a, b)),
                _ => None,
            }
        };
        let bad = || mismatch("attention", vq, vk);
        let (g, tq, d) = as3(vq).ok_or_else(bad)?;
        let (gk, tk, dk) = as3(vk).ok_or_else(bad)?;
        if gk != g || dk != d || vv.shape() != vk.shape() {
            return Err(bad());
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; g * heads * tq * tk];
        let mut out = vec![0.0; g * tq * d];
        let mut scores = vec![0.0; tk];
        for gi in 0..g {
            let qg = &vq.data()[gi * tq * d..(gi + 1) * tq * d];
            let kg = &vk.data()[gi * tk * d..(gi + 1) * tk * d];
            let vg = &vv.data()[gi * tk * d..(gi + 1) * tk * d];
            for h in 0..heads {
                let c0 = h * dh;
                for t in 0..tq {
                    let qrow = &qg[t * d + c0..t * d + c0 + dh];
                    for (s, sc) in scores.iter_mut().enumerate() {
                        let krow = &kg[s * d + c0..s * d + c0 + dh];
                        *sc = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let p = softmax_rows(&scores, tk);
                    let base = ((gi * heads + h) * tq + t) * tk;
                    probs[base..base + tk].copy_from_slice(&p);
                    let orow = &mut out[(gi * tq + t) * d + c0..(gi * tq + t) * d + c0 + dh];
                    for (s, &ps) in p.iter().enumerate() {
                        let vrow = &vg[s * d + c0..s * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += ps * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vq.shape(), out);
        self.attention_pairs += (g * tq * tk) as u64;
        let geom = AttnGeom {
            groups: g,
            heads,
            tq,
            tk,
            dim: d,
        };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities `[G, heads, T, S]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<Tensor> {
        match &self.nodes[id.0].op {
            Op::Attention { geom, probs, .. } => Some(Tensor::from_vec(
                &[geom.groups, geom.heads, geom.tq, geom.tk],
                probs.clone(),
            )),
            _ => None,
        }
    }

    /// Reverse pass from a scalar loss. Gradients from a previous call are
    /// discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[id.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(n.value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b, plan } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| plan.grad_a(gd, vb.data(), da));
                acc(*b, &mut |db| plan.grad_b(va.data(), gd, db));
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    acc(id, &mut |d| add_into(d, gd));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBroadcast { x, y } => {
                acc(*x, &mut |d| add_into(d, gd));
                let ly = nodes[y.0].value.numel();
                acc(*y, &mut |d| {
                    for chunk in gd.chunks(ly) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |d| {
                for (d, g) in d.iter_mut().zip(gd) {
                    *d += scale * g;
                }
            }),
            Op::Sum { x } => acc(*x, &mut |d| {
                for d in d.iter_mut() {
                    *d += gd[0];
                }
            }),
            Op::Softmax { x } => {
                let y = &node.value;
                let w = y.last_dim();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(gd.chunks(w)).zip(y.data().chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let y = &node.value;
                let w = y.last_dim();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(gd.chunks(w)).zip(y.data().chunks(w)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - y.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = nodes[gain.0].value.data();
                let w = gv.len();
                acc(*gain, &mut |d| {
                    for (gr, hr) in gd.chunks(w).zip(xhat.chunks(w)) {
                        for ((d, g), h) in d.iter_mut().zip(gr).zip(hr) {
                            *d += g * h;
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in gd.chunks(w) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dh = vec![0.0; w];
                    for (r, (dr, gr)) in d.chunks_mut(w).zip(gd.chunks(w)).enumerate() {
                        let hr = &xhat[r * w..(r + 1) * w];
                        for c in 0..w {
                            dh[c] = gr[c] * gv[c];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / w as f64;
                        for c in 0..w {
                            dr[c] += k * (w as f64 * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(gd).zip(vx) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Ln { x } => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(vx) {
                        *d += g / x;
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |d| add_into(d, gd)),
            Op::Transpose { x } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += gd[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, &mut |d| add_into(d, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let w = node.value.last_dim();
                acc(*x, &mut |d| add_into(&mut d[start * w..], gd));
            }
            Op::AddRowsAt { base, inc, offset } => {
                let w = node.value.last_dim();
                acc(*base, &mut |d| add_into(d, gd));
                acc(*inc, &mut |d| add_into(d, &gd[offset * w..]));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(w).enumerate() {
                        let gr = &gd[r * w..(r + 1) * w];
                        let yr = &y[r * w..(r + 1) * w];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..w {
                            dr[c] += (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    *geom,
                    probs,
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                    gd,
                );
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn attention_backward(
    geom: AttnGeom,
    probs: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnGeom {
        groups,
        heads,
        tq,
        tk,
        dim: d,
    } = geom;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; tk];
    for gi in 0..groups {
        let (qo, ko) = (gi * tq * d, gi * tk * d);
        for h in 0..heads {
            let c0 = h * dh;
            for t in 0..tq {
                let p = &probs[((gi * heads + h) * tq + t) * tk..][..tk];
                let go = &dout[qo + t * d + c0..qo + t * d + c0 + dh];
                for s in 0..tk {
                    let vrow = &v[ko + s * d + c0..ko + s * d + c0 + dh];
                    dp[s] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    let dvrow = &mut dv[ko + s * d + c0..ko + s * d + c0 + dh];
                    for (dvv, &g) in dvrow.iter_mut().zip(go) {
                        *dvv += p[s] * g;
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for s in 0..tk {
                    let ds = p[s] * (dp[s] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[qo + t * d + c0 + c] += ds * k[ko + s * d + c0 + c];
                        dk[ko + s * d + c0 + c] += ds * q[qo + t * d + c0 + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::new();
        let xv = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let x = g.param(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), xv.map(|v| 2.0 * v));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let big = g.constant(Tensor::from_vec(&[2], vec![1000.0, 1000.0]));
        let y = g.softmax(big);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::full(&[1, 3], 7.0));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_asymptotes() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(20.0) - 20.0).abs() < 1e-12);
        assert!(gelu(-20.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng(10);
        let a = Tensor::randn(&[4, 5], 1.0, &mut r);
        let b = Tensor::randn(&[5, 3], 1.0, &mut r);
        let err = finite_diff_check(
            |g, p| {
                let c = g.matmul(p[0], p[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            1e-5,
            35,
            7,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let x = Tensor::randn(&[3, 6], 1.0, &mut r);
        let gain = Tensor::randn(&[6], 1.0, &mut r);
        let bias = Tensor::randn(&[6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 6], 1.0, &mut r);
        let err = finite_diff_check(
            |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2])?;
                let wc = g.constant(w.clone());
                let z = g.mul(y, wc)?;
                Ok(g.sum(z))
            },
            &[x, gain, bias],
            1e-5,
            30,
            8,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut r = rng(12);
        let x = Tensor::uniform(&[2, 5], 0.2, 2.0, &mut r);
        let y = Tensor::randn(&[5], 1.0, &mut r);
        let err = finite_diff_check(
            |g, p| {
                let a = g.add_broadcast(p[0], p[1])?;
                let b = g.gelu(a);
                let c = g.sigmoid(b);
                let l = g.ln(p[0]);
                let e = g.log_softmax(l);
                let f = g.softmax(c);
                let h = g.mul(e, f)?;
                let t = g.transpose(h)?;
                let n = g.l2_normalize_rows(t);
                let s = g.slice_rows(n, 1, 3)?;
                let cat = g.concat_rows(&[s, n])?;
                let base = g.transpose(cat)?;
                let inc = g.slice_rows(base, 0, 1)?;
                let inc = g.gelu(inc);
                let out = g.add_rows_at(base, inc, 1)?;
                let out = g.reshape(out, &[2, 8])?;
                let sq = g.mul(out, out)?;
                Ok(g.mean(sq))
            },
            &[x, y],
            1e-6,
            15,
            9,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut r = rng(13);
        let q = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let k = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let v = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let err = finite_diff_check(
            |g, p| {
                let o = g.attention(p[0], p[1], p[2], 2)?;
                let wc = g.constant(w.clone());
                let z = g.mul(o, wc)?;
                Ok(g.sum(z))
            },
            &[q, k, v],
            1e-5,
            40,
            10,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn fused_attention_equals_primitive_composition() {
        let mut r = rng(14);
        let (t, s, d, heads) = (3, 4, 6, 2);
        let q = Tensor::randn(&[t, d], 1.0, &mut r);
        let k = Tensor::randn(&[s, d], 1.0, &mut r);
        let v = Tensor::randn(&[s, d], 1.0, &mut r);
        let mut g = Graph::new();
        let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let fused = g.attention(qn, kn, vn, heads).unwrap();
        let dh = d / heads;
        for h in 0..heads {
            let cols = |m: &Tensor, rows: usize| {
                let mut out = Vec::new();
                for i in 0..rows {
                    out.extend_from_slice(&m.data()[i * d + h * dh..i * d + (h + 1) * dh]);
                }
                Tensor::from_vec(&[rows, dh], out)
            };
            let (qh, kh, vh) = (cols(&q, t), cols(&k, s), cols(&v, s));
            let scores = qh.matmul(&kh.t()).unwrap().map(|x| x / (dh as f64).sqrt());
            let p = Tensor::from_vec(&[t, s], softmax_rows(scores.data(), s));
            let o = p.matmul(&vh).unwrap();
            let fv = g.value(fused);
            for i in 0..t {
                for c in 0..dh {
                    let a = fv.data()[i * d + h * dh + c];
                    assert!((a - o.data()[i * dh + c]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(g.attention_pairs(), (t * s) as u64);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn inference_graph_has_no_gradients() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::full(&[2], 3.0));
        assert!(!g.requires_grad(x));
    }
}
