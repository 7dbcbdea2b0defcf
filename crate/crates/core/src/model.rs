//! The context-detail transformer and its single-resolution ViT baseline.
//!
//! Context tokens come from `p×p` sub-patches of the level-`L` tile, detail
//! sub-tokens from `s×s` sub-patches of each co-located `q×q` detail patch.
//! Every block runs local attention inside each detail patch, adds a linear
//! projection of the detail patch into its context token, then runs global
//! attention over the context tokens. The ViT baseline is the same network
//! without the detail path; both share parameter names on the context side.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::CDNetConfig;
use crate::error::{Error, Result};
use crate::nn::{Block, Bound, Init, LayerNorm, Linear, ParamStore};
use crate::pyramid::PatchPair;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal init of embeddings, position
/// encodings and the CLS token.
pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    CdNet,
    Vit,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::CdNet => "cdnet",
            Arch::Vit => "vit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cdnet" => Ok(Arch::CdNet),
            "vit" => Ok(Arch::Vit),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetailPath {
    pub embed: Linear,
    pub pos: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ContextDetailBlock {
    pub detail: Option<Block>,
    pub fuse: Option<Linear>,
    pub context: Block,
}

/// Parameter layout of one network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: CDNetConfig,
    pub arch: Arch,
    pub embed: Linear,
    pub cls: usize,
    pub pos: usize,
    pub detail: Option<DetailPath>,
    pub blocks: Vec<ContextDetailBlock>,
    pub norm: LayerNorm,
}

/// Graph nodes of the current token state.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    /// Context tokens `[n+1, dim1]`, CLS first.
    pub c: NodeId,
    /// Detail sub-tokens `[n, m, dim2]`; absent for the ViT.
    pub d: Option<NodeId>,
}

/// Materialized token state after a given number of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub c: Tensor,
    pub d: Option<Tensor>,
    pub block: usize,
}

/// Result of a graph-level forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// CLS embedding after the final norm, `[dim1]`.
    pub embedding: NodeId,
    /// Context attention node of each block.
    pub context_attn: Vec<NodeId>,
    /// Detail attention node of each block (empty for the ViT).
    pub detail_attn: Vec<NodeId>,
}

/// Result of an inference forward pass.
#[derive(Clone, Debug)]
pub struct Output {
    pub embedding: Tensor,
    /// Context attention `[heads, n+1, n+1]` per block.
    pub context_attn: Vec<Tensor>,
    /// Query-key pairs scored during the pass.
    pub attention_pairs: u64,
}

/// Pixel value centered and scaled to roughly unit spread.
fn normalize_px(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.25
}

/// Rows of flattened `side×side` RGB sub-patches. Sub-patches are ordered by
/// the outer grid of `outer×outer` cells (each `cell` pixels wide) and then
/// row-major inside each cell; pixels inside a sub-patch are row-major with
/// interleaved channels.
fn im2col(img: &RgbImage, cell: usize, side: usize) -> Tensor {
    let outer = img.width() as usize / cell;
    let inner = cell / side;
    let width = side * side * 3;
    let mut data = Vec::with_capacity(outer * outer * inner * inner * width);
    for gr in 0..outer {
        for gc in 0..outer {
            for sr in 0..inner {
                for sc in 0..inner {
                    let (y0, x0) = (gr * cell + sr * side, gc * cell + sc * side);
                    for dy in 0..side {
                        for dx in 0..side {
                            let px = img.get_pixel((x0 + dx) as u32, (y0 + dy) as u32);
                            data.extend(px.0.iter().map(|&v| normalize_px(v)));
                        }
                    }
                }
            }
        }
    }
    let rows = data.len() / width;
    Tensor::from_vec(&[rows, width], data)
}

impl Model {
    /// Registers a freshly initialized network in `store`.
    pub fn build<R: rand::Rng + ?Sized>(
        config: CDNetConfig,
        arch: Arch,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let t = Init::TruncNormal(EMBED_STD);
        let embed = Linear::new(store, "embed_l", c.p * c.p * 3, c.dim1, t, rng);
        let cls = store.add("cls", Tensor::trunc_normal(&[1, c.dim1], EMBED_STD, rng), false);
        let pos = store.add("pos_c", Tensor::trunc_normal(&[c.n + 1, c.dim1], EMBED_STD, rng), false);
        let detail = match arch {
            Arch::CdNet => Some(DetailPath {
                embed: Linear::new(store, "embed_h", c.s * c.s * 3, c.dim2, t, rng),
                pos: store.add("pos_d", Tensor::trunc_normal(&[c.m, c.dim2], EMBED_STD, rng), false),
            }),
            Arch::Vit => None,
        };
        let mut blocks = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let (detail, fuse) = match arch {
                Arch::CdNet => {
                    let name = format!("blocks.{l}.detail");
                    let d = Block::new(store, &name, c.dim2, c.head2, c.mlp_ratio, rng)?;
                    let name = format!("blocks.{l}.fuse");
                    let f = Linear::new(store, &name, c.m * c.dim2, c.dim1, Init::Zero, rng);
                    (Some(d), Some(f))
                }
                Arch::Vit => (None, None),
            };
            let name = format!("blocks.{l}.context");
            let context = Block::new(store, &name, c.dim1, c.head1, c.mlp_ratio, rng)?;
            blocks.push(ContextDetailBlock {
                detail,
                fuse,
                context,
            });
        }
        let norm = LayerNorm::new(store, "norm", c.dim1);
        Ok(Model {
            config,
            arch,
            embed,
            cls,
            pos,
            detail,
            blocks,
            norm,
        })
    }

    /// A network and its parameters initialized from `seed`.
    pub fn init(config: CDNetConfig, arch: Arch, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, arch, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// The layout of a network whose parameters are already in `store` (for
    /// instance loaded from a checkpoint). Parameter values are untouched.
    pub fn layout(config: CDNetConfig, arch: Arch, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Self::init(config, arch, 0)?;
        for (i, (name, t)) in fresh.iter().enumerate() {
            let j = store
                .position(name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter {name}")))?;
            if j != i || store.tensor(j).shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name} has shape {:?} at slot {j}, expected {:?} at slot {i}",
                    store.tensor(j).shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Store indices of the fusion projection parameters.
    pub fn fusion_params(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| b.fuse)
            .flat_map(|f| [f.w, f.b])
            .collect()
    }

    fn check_pair(&self, pair: &PatchPair) -> Result<()> {
        let c = &self.config;
        let ctx = pair.context.dimensions();
        if ctx != (c.patch_px() as u32, c.patch_px() as u32) {
            return Err(Error::Config(format!(
                "context patch_px = sqrt(n)*p violated: image is {}x{}, config needs {}",
                ctx.0,
                ctx.1,
                c.patch_px()
            )));
        }
        if self.arch == Arch::CdNet {
            let det = pair.detail.dimensions();
            if det != (c.detail_px() as u32, c.detail_px() as u32) {
                return Err(Error::Config(format!(
                    "detail side = sqrt(n)*q violated: image is {}x{}, config needs {}",
                    det.0,
                    det.1,
                    c.detail_px()
                )));
            }
        }
        Ok(())
    }

    /// Context tokens of a `patch_px`-square image: CLS prepended, position
    /// encoding added.
    pub fn tokenize_context(&self, g: &mut Graph, p: &Bound, img: &RgbImage) -> Result<NodeId> {
        let c = &self.config;
        let patches = g.constant(im2col(img, c.p, c.p));
        let tok = self.embed.forward(g, p, patches)?;
        let all = g.concat_rows(&[p[self.cls], tok])?;
        g.add_broadcast(all, p[self.pos])
    }

    /// Detail sub-tokens `[n, m, dim2]` of the detail image.
    pub fn tokenize_detail(&self, g: &mut Graph, p: &Bound, img: &RgbImage) -> Result<NodeId> {
        let c = &self.config;
        let path = self.detail_path()?;
        let patches = g.constant(im2col(img, c.q, c.s));
        let tok = path.embed.forward(g, p, patches)?;
        let tok = g.reshape(tok, &[c.n, c.m, c.dim2])?;
        g.add_broadcast(tok, p[path.pos])
    }

    fn detail_path(&self) -> Result<DetailPath> {
        self.detail
            .ok_or_else(|| Error::Usage("the ViT baseline has no detail path".into()))
    }

    pub fn tokenize(&self, g: &mut Graph, p: &Bound, pair: &PatchPair) -> Result<Tokens> {
        self.check_pair(pair)?;
        let c = self.tokenize_context(g, p, &pair.context)?;
        let d = match self.arch {
            Arch::CdNet => Some(self.tokenize_detail(g, p, &pair.detail)?),
            Arch::Vit => None,
        };
        Ok(Tokens { c, d })
    }

    fn block_at(&self, layer: usize) -> Result<&ContextDetailBlock> {
        self.blocks.get(layer).ok_or(Error::Range {
            what: "block index",
            value: layer,
            lo: 0,
            hi: self.blocks.len().saturating_sub(1),
        })
    }

    /// Pre-norm transformer block applied independently inside each detail
    /// patch. Returns the new sub-tokens and the attention node.
    pub fn detail_block(
        &self,
        g: &mut Graph,
        p: &Bound,
        d: NodeId,
        layer: usize,
    ) -> Result<(NodeId, NodeId)> {
        let blk = self.block_at(layer)?.detail.ok_or_else(|| {
            Error::Usage("the ViT baseline has no detail blocks".into())
        })?;
        blk.forward(g, p, d)
    }

    /// Adds the projection of each concatenated detail patch to its context
    /// token. Row 0 (CLS) is left untouched.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, c: NodeId, d: NodeId, layer: usize) -> Result<NodeId> {
        let cfg = &self.config;
        let f = self.block_at(layer)?.fuse.ok_or_else(|| {
            Error::Usage("the ViT baseline has no fusion".into())
        })?;
        let flat = g.reshape(d, &[cfg.n, cfg.m * cfg.dim2])?;
        let inc = f.forward(g, p, flat)?;
        g.add_rows_at(c, inc, 1)
    }

    /// Global pre-norm transformer block over all context tokens.
    pub fn context_block(
        &self,
        g: &mut Graph,
        p: &Bound,
        c: NodeId,
        layer: usize,
    ) -> Result<(NodeId, NodeId)> {
        self.block_at(layer)?.context.forward(g, p, c)
    }

    /// Runs the first `blocks` blocks from `tokens`.
    pub fn run_blocks(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Tokens,
        blocks: usize,
    ) -> Result<(Tokens, Vec<NodeId>, Vec<NodeId>)> {
        let Tokens { mut c, mut d } = tokens;
        let mut context_attn = Vec::with_capacity(blocks);
        let mut detail_attn = Vec::with_capacity(blocks);
        for l in 0..blocks {
            if let Some(dn) = d {
                let (dn, a) = self.detail_block(g, p, dn, l)?;
                detail_attn.push(a);
                c = self.fuse(g, p, c, dn, l)?;
                d = Some(dn);
            }
            let (cn, a) = self.context_block(g, p, c, l)?;
            context_attn.push(a);
            c = cn;
        }
        Ok((Tokens { c, d }, context_attn, detail_attn))
    }

    /// Final norm of the CLS row, `[dim1]`.
    pub fn readout(&self, g: &mut Graph, p: &Bound, c: NodeId) -> Result<NodeId> {
        let cls = g.slice_rows(c, 0, 1)?;
        let normed = self.norm.forward(g, p, cls)?;
        g.reshape(normed, &[self.config.dim1])
    }

    /// Full forward on a patch pair. The ViT only reads the context image.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, pair: &PatchPair) -> Result<ForwardNodes> {
        let tokens = self.tokenize(g, p, pair)?;
        let (tokens, context_attn, detail_attn) = self.run_blocks(g, p, tokens, self.blocks.len())?;
        let embedding = self.readout(g, p, tokens.c)?;
        Ok(ForwardNodes {
            embedding,
            context_attn,
            detail_attn,
        })
    }

    /// ViT forward on a context image alone.
    pub fn vit_forward_graph(&self, g: &mut Graph, p: &Bound, img: &RgbImage) -> Result<ForwardNodes> {
        if self.arch != Arch::Vit {
            return Err(Error::Usage("vit_forward needs a ViT layout".into()));
        }
        let side = self.config.patch_px() as u32;
        if img.dimensions() != (side, side) {
            return Err(Error::Config(format!(
                "image side = sqrt(n)*p violated: image is {}x{}, config needs {side}",
                img.width(),
                img.height()
            )));
        }
        let c = self.tokenize_context(g, p, img)?;
        let (tokens, context_attn, _) =
            self.run_blocks(g, p, Tokens { c, d: None }, self.blocks.len())?;
        let embedding = self.readout(g, p, tokens.c)?;
        Ok(ForwardNodes {
            embedding,
            context_attn,
            detail_attn: Vec::new(),
        })
    }

    fn collect(g: &Graph, nodes: &ForwardNodes) -> Output {
        Output {
            embedding: g.value(nodes.embedding).clone(),
            context_attn: nodes
                .context_attn
                .iter()
                .map(|&a| {
                    let t = g.attention_probs(a).expect("attention node");
                    let s = t.shape().to_vec();
                    t.reshape(&s[1..]).expect("single group")
                })
                .collect(),
            attention_pairs: g.attention_pairs(),
        }
    }

    /// Inference forward with parameters from `store`.
    pub fn forward(&self, store: &ParamStore, pair: &PatchPair) -> Result<Output> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let nodes = self.forward_graph(&mut g, &p, pair)?;
        Ok(Self::collect(&g, &nodes))
    }

    /// Inference ViT forward on a context image.
    pub fn vit_forward(&self, store: &ParamStore, img: &RgbImage) -> Result<Output> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let nodes = self.vit_forward_graph(&mut g, &p, img)?;
        Ok(Self::collect(&g, &nodes))
    }

    /// Token state after `blocks` blocks (0 gives the tokenization).
    pub fn token_state(&self, store: &ParamStore, pair: &PatchPair, blocks: usize) -> Result<TokenState> {
        if blocks > self.blocks.len() {
            return Err(Error::Range {
                what: "block count",
                value: blocks,
                lo: 0,
                hi: self.blocks.len(),
            });
        }
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let tokens = self.tokenize(&mut g, &p, pair)?;
        let (tokens, _, _) = self.run_blocks(&mut g, &p, tokens, blocks)?;
        Ok(TokenState {
            c: g.value(tokens.c).clone(),
            d: tokens.d.map(|d| g.value(d).clone()),
            block: blocks,
        })
    }
}

/// CLS attention over the `n` context tokens at block `layer` (1-based),
/// averaged over heads, as a `√n×√n` grid min-max normalized to `[0, 1]`. A
/// constant field maps to all zeros.
pub fn attention_map(context_attn: &[Tensor], layer: usize) -> Result<Tensor> {
    if layer == 0 || layer > context_attn.len() {
        return Err(Error::Range {
            what: "attention layer",
            value: layer,
            lo: 1,
            hi: context_attn.len(),
        });
    }
    let a = &context_attn[layer - 1];
    let [heads, t, _] = *a.shape() else {
        return Err(Error::Dimension {
            op: "attention_map",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    };
    let n = t - 1;
    let side = num_integer::Roots::sqrt(&n);
    if side * side != n {
        return Err(Error::Config(format!("{n} context tokens do not form a square grid")));
    }
    let mut map = vec![0.0; n];
    for h in 0..heads {
        let row = &a.data()[h * t * t..h * t * t + t];
        for (m, &v) in map.iter_mut().zip(&row[1..]) {
            *m += v / heads as f64;
        }
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for m in map.iter_mut() {
        *m = if span > 0.0 { (*m - lo) / span } else { 0.0 };
    }
    Ok(Tensor::from_vec(&[side, side], map))
}
