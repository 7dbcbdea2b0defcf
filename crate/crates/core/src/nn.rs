//! Named parameter storage and the transformer building blocks.
//!
//! Layers are described by small `Copy` layout structs holding indices into
//! a [`ParamStore`]. A forward pass binds the store into a graph once and the
//! layouts look their nodes up in the resulting [`Bound`] table.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        self.decay.push(decay);
        i
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set parameter",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Integrity(format!(
                "parameter names differ ({} vs {} entries)",
                self.len(),
                other.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph nodes of a bound [`ParamStore`], indexed like the store.
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Wraps nodes that were bound in store order elsewhere.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Bound(nodes)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    /// Moves the gradients out of `g` in store order.
    pub fn take_grads(&self, g: &mut Graph) -> Vec<Tensor> {
        self.0.iter().map(|&id| g.take_grad(id)).collect()
    }
}

impl Index<usize> for Bound {
    type Output = NodeId;

    fn index(&self, i: usize) -> &NodeId {
        &self.0[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1/√fan_in`.
    FanIn,
    Zero,
    TruncNormal(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::FanIn => Tensor::randn(&[din, dout], 1.0 / (din as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(&[din, dout]),
            Init::TruncNormal(std) => Tensor::trunc_normal(&[din, dout], std, rng),
        };
        Linear {
            w: store.add(format!("{name}.w"), w, true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout]), false),
        }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p[self.w])?;
        g.add_broadcast(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0), false),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// `o_init` is the init of the output projection (zero on residual
    /// branches).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        o_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, Init::FanIn, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, Init::FanIn, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, Init::FanIn, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, o_init, rng),
            heads,
        })
    }
}

/// Multi-head attention of `x_q` over `x_kv`. Inputs are `[T, D]` or grouped
/// `[G, T, D]` (groups attend independently). Returns the output and the
/// attention node (see [`Graph::attention_probs`]).
pub fn mha(
    g: &mut Graph,
    p: &Bound,
    attn: &Attention,
    x_q: NodeId,
    x_kv: NodeId,
) -> Result<(NodeId, NodeId)> {
    let q = attn.q.forward(g, p, x_q)?;
    let k = attn.k.forward(g, p, x_kv)?;
    let v = attn.v.forward(g, p, x_kv)?;
    let a = g.attention(q, k, v, attn.heads)?;
    let out = attn.o.forward(g, p, a)?;
    Ok((out, a))
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, ratio * dim, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), ratio * dim, dim, out_init, rng),
        }
    }
}

/// linear → GELU → linear.
pub fn mlp_block(g: &mut Graph, p: &Bound, mlp: &Mlp, x: NodeId) -> Result<NodeId> {
    let h = mlp.fc1.forward(g, p, x)?;
    let h = g.gelu(h);
    mlp.fc2.forward(g, p, h)
}

/// Pre-norm transformer block: `x' = x + MSA(LN(x))`, `y = x' + MLP(LN(x'))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, Init::Zero, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_ratio, Init::Zero, rng),
        })
    }

    /// Returns the block output and its attention node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.ln1.forward(g, p, x)?;
        let (a, attn) = mha(g, p, &self.attn, h, h)?;
        let x1 = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x1)?;
        let m = mlp_block(g, p, &self.mlp, h)?;
        Ok((g.add(x1, m)?, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for i in 0..store.len() {
            let shape = store.tensor(i).shape().to_vec();
            *store.tensor_mut(i) = Tensor::randn(&shape, 0.5, rng);
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 2, Init::FanIn, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let (_, a) = mha(&mut g, &p, &attn, x, x).unwrap();
        assert_eq!(g.attention_probs(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 2, Init::FanIn, &mut rng).unwrap();
        store.set("a.q.w", Tensor::zeros(&[4, 4])).unwrap();
        store.set("a.v.w", Tensor::eye(4)).unwrap();
        store.set("a.o.w", Tensor::eye(4)).unwrap();
        let xv = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(xv.clone());
        let (out, _) = mha(&mut g, &p, &attn, x, x).unwrap();
        for c in 0..4 {
            let mean = (0..3).map(|r| xv.data()[r * 4 + c]).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((g.value(out).data()[r * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let r = Attention::new(&mut store, "a", 6, 4, Init::FanIn, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn mha_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 2, Init::FanIn, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let mut params: Vec<Tensor> = store.tensors().to_vec();
        params.push(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, ids| {
                let p = Bound(ids[..ids.len() - 1].to_vec());
                let x = ids[ids.len() - 1];
                let (o, _) = mha(g, &p, &attn, x, x)?;
                let wc = g.constant(w.clone());
                let z = g.mul(o, wc)?;
                Ok(g.sum(z))
            },
            &params,
            1e-5,
            40,
            5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 4, 2, Init::Zero, &mut rng);
        store.set("m.fc1.w", Tensor::zeros(&[4, 8])).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let y = mlp_block(&mut g, &p, &mlp, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 4, 2, Init::FanIn, &mut rng);
        randomize(&mut store, &mut rng);
        let mut params: Vec<Tensor> = store.tensors().to_vec();
        params.push(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, ids| {
                let p = Bound(ids[..ids.len() - 1].to_vec());
                let y = mlp_block(g, &p, &mlp, ids[ids.len() - 1])?;
                let wc = g.constant(w.clone());
                let z = g.mul(y, wc)?;
                Ok(g.sum(z))
            },
            &params,
            1e-5,
            30,
            8,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let blk = Block::new(&mut store, "b", 8, 2, 2, &mut rng).unwrap();
        let xv = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(xv.clone());
        let (y, _) = blk.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &xv);
    }
}
