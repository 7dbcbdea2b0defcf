//! Dual-stream multiple-instance classifier over frozen patch embeddings.
//!
//! The instance stream scores every patch and keeps the maximum. The bag
//! stream attends from the highest-scoring (critical) instance's query to all
//! queries and classifies the attention-weighted sum of values. The slide
//! score averages the two streams' sigmoids.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::optim::AdamW;
use crate::parallel::{self, Exec};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";
/// Query and value widths of the attention stream.
pub const D_QUERY: usize = 128;
pub const D_VALUE: usize = 128;
/// The similarity is unscaled, so a fan-in query init saturates the softmax
/// onto the critical instance from the first step.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// `[N, d]` instance features.
    pub features: Tensor,
    pub label: u8,
    pub slide_id: String,
}

impl Bag {
    pub fn new(features: Tensor, label: u8, slide_id: impl Into<String>) -> Result<Self> {
        if features.ndim() != 2 || features.shape()[0] == 0 {
            return Err(Error::Config(format!(
                "a bag needs an [N >= 1, d] feature matrix, got {:?}",
                features.shape()
            )));
        }
        Ok(Bag {
            features,
            label,
            slide_id: slide_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MilLayout {
    pub dim: usize,
    pub instance: Linear,
    pub query: Linear,
    pub value: Linear,
    pub bag: Linear,
}

/// Layout plus parameter values.
#[derive(Clone, Debug)]
pub struct MILParams {
    pub layout: MilLayout,
    pub store: ParamStore,
}

impl MILParams {
    /// Instance classifier starts at zero so the first critical instance is row 0
    /// of the canonical order rather than whatever a random scorer prefers.
    pub fn init(dim: usize, dq: usize, dv: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = MilLayout {
            dim,
            instance: Linear::new(&mut store, "mil.instance", dim, 1, Init::Zero, &mut rng),
            query: Linear::new(&mut store, "mil.query", dim, dq, Init::TruncNormal(QUERY_INIT_STD), &mut rng),
            value: Linear::new(&mut store, "mil.value", dim, dv, Init::FanIn, &mut rng),
            bag: Linear::new(&mut store, "mil.bag", dv, 1, Init::FanIn, &mut rng),
        };
        MILParams { layout, store }
    }

    pub fn is_finite(&self) -> bool {
        self.store.tensors().iter().all(Tensor::is_finite)
    }
}

fn check_dim(bag: &Bag, layout: &MilLayout) -> Result<()> {
    if bag.dim() != layout.dim {
        return Err(Error::Config(format!(
            "bag {} has feature width {}, classifier expects {}",
            bag.slide_id,
            bag.dim(),
            layout.dim
        )));
    }
    Ok(())
}

/// Per-instance logits.
pub fn instance_scores(bag: &Bag, params: &MILParams) -> Result<Tensor> {
    check_dim(bag, &params.layout)?;
    let mut g = Graph::inference();
    let p = params.store.bind(&mut g);
    let x = g.constant(bag.features.clone());
    let s = params.layout.instance.forward(&mut g, &p, x)?;
    g.value(s).reshape(&[bag.len()])
}

/// Graph nodes of one bag evaluation.
#[derive(Clone, Debug)]
pub struct BagNodes {
    pub bag_logit: NodeId,
    pub instance_max_logit: NodeId,
    /// Slide score `½(σ(bag) + σ(max instance))`, shape `[1, 1]`.
    pub score: NodeId,
    /// Attention `[1, N]` in canonical row order.
    pub attention: NodeId,
    /// `order[r]` is the original row of canonical row `r`.
    pub order: Vec<usize>,
    pub critical: usize,
}

/// Row order sorted by feature values (ties by original index), which makes
/// every reduction over instances independent of the input row order.
fn canonical_order(features: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..features.rows()).collect();
    order.sort_by(|&a, &b| {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Builds the dual-stream forward for `bag` in `g`.
pub fn bag_graph(g: &mut Graph, p: &Bound, layout: &MilLayout, bag: &Bag) -> Result<BagNodes> {
    check_dim(bag, layout)?;
    let n = bag.len();
    let d = bag.dim();
    let order = canonical_order(&bag.features);
    let mut data = Vec::with_capacity(n * d);
    for &r in &order {
        data.extend_from_slice(bag.features.row(r));
    }
    let x = g.constant(Tensor::from_vec(&[n, d], data));
    let scores = layout.instance.forward(g, p, x)?;
    let s = g.value(scores).data();
    // Critical instance: highest score, first in canonical order on ties so
    // the choice does not depend on the input row order.
    let mut critical_pos = 0;
    for pos in 1..n {
        let (best, cand) = (s[critical_pos], s[pos]);
        if cand > best {
            critical_pos = pos;
        }
    }
    let critical = order[critical_pos];
    let instance_max = g.slice_rows(scores, critical_pos, 1)?;
    let q = layout.query.forward(g, p, x)?;
    let v = layout.value.forward(g, p, x)?;
    let qc = g.slice_rows(q, critical_pos, 1)?;
    let qct = g.transpose(qc)?;
    let sim = g.matmul(q, qct)?;
    let sim = g.reshape(sim, &[1, n])?;
    let attention = g.softmax(sim);
    let emb = g.matmul(attention, v)?;
    let bag_logit = layout.bag.forward(g, p, emb)?;
    let sb = g.sigmoid(bag_logit);
    let si = g.sigmoid(instance_max);
    let both = g.add(sb, si)?;
    let score = g.scale(both, 0.5);
    Ok(BagNodes {
        bag_logit,
        instance_max_logit: instance_max,
        score,
        attention,
        order,
        critical,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput {
    pub bag_logit: f64,
    pub instance_max_logit: f64,
    pub score: f64,
    /// Attention weight of each instance in input row order.
    pub attention: Vec<f64>,
    pub critical: usize,
}

pub fn bag_forward(bag: &Bag, params: &MILParams) -> Result<BagOutput> {
    let mut g = Graph::inference();
    let p = params.store.bind(&mut g);
    let nodes = bag_graph(&mut g, &p, &params.layout, bag)?;
    let canon = g.value(nodes.attention).data();
    let mut attention = vec![0.0; bag.len()];
    for (pos, &row) in nodes.order.iter().enumerate() {
        attention[row] = canon[pos];
    }
    Ok(BagOutput {
        bag_logit: g.value(nodes.bag_logit).item(),
        instance_max_logit: g.value(nodes.instance_max_logit).item(),
        score: g.value(nodes.score).item(),
        attention,
        critical: nodes.critical,
    })
}

#[derive(Clone, Debug)]
pub struct MilHyper {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for MilHyper {
    fn default() -> Self {
        MilHyper {
            epochs: 40,
            lr: 2e-4,
            weight_decay: 0.05,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedMil {
    pub params: MILParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

const PROB_EPS: f64 = 1e-12;

fn bce_graph(g: &mut Graph, score: NodeId, label: u8) -> Result<NodeId> {
    let s = g.affine(score, 1.0 - 2.0 * PROB_EPS, PROB_EPS);
    let target = if label == 1 { s } else { g.affine(s, -1.0, 1.0) };
    let l = g.ln(target);
    let l = g.sum(l);
    Ok(g.scale(l, -1.0))
}

fn single_class(bags: &[Bag]) -> Option<u8> {
    let first = bags.first()?.label;
    bags.iter().all(|b| b.label == first).then_some(first)
}

/// Binary cross-entropy on the slide score, one bag per AdamW step. Returns
/// the parameters of the epoch with the best validation AUC (later epochs
/// win ties).
pub fn train_mil(train: &[Bag], val: &[Bag], init: MILParams, hyper: &MilHyper) -> Result<TrainedMil> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("MIL training needs non-empty train and validation splits".into()));
    }
    if let Some(label) = single_class(train) {
        return Err(Error::SingleClass {
            split: "training",
            label,
        });
    }
    let mut params = init;
    let mut optim = AdamW::new(&params.store, hyper.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, MILParams)> = None;
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut g = Graph::new();
            let p = params.store.bind(&mut g);
            let nodes = bag_graph(&mut g, &p, &params.layout, &train[i])?;
            let loss = bce_graph(&mut g, nodes.score, train[i].label)?;
            total += g.value(loss).item();
            g.backward(loss)?;
            let grads = p.take_grads(&mut g);
            optim.step(&mut params.store, &grads, hyper.lr);
        }
        let (_, val_auc) = evaluate(val, &params, hyper.exec)?;
        history.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_auc,
        });
        let key = val_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| key >= *b) {
            best = Some((key, epoch, params.clone()));
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    Ok(TrainedMil {
        params,
        best_epoch,
        history,
    })
}

/// Mann-Whitney AUC with ties counted one half; `None` without both classes.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += match p.partial_cmp(&n) {
                Some(Ordering::Greater) => 1.0,
                Some(Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Accuracy at threshold 0.5, threshold-free.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| u8::from(**s >= 0.5) == l)
        .count();
    hits as f64 / scores.len().max(1) as f64
}

pub fn predict(bags: &[Bag], params: &MILParams, exec: Exec) -> Result<Vec<f64>> {
    parallel::map(exec, bags, |b| bag_forward(b, params).map(|o| o.score))
        .into_iter()
        .collect()
}

/// `(accuracy, AUC)`; AUC is `None` for a single-class set.
pub fn evaluate(bags: &[Bag], params: &MILParams, exec: Exec) -> Result<(f64, Option<f64>)> {
    let scores = predict(bags, params, exec)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    Ok((accuracy(&scores, &labels), auc(&scores, &labels)))
}

/// Stratified split of `labels` into `(rest, held_out)` index lists, with
/// `round(fraction · count)` of each class held out.
pub fn stratified_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rest = Vec::new();
    let mut held = Vec::new();
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        held.extend_from_slice(&idx[..k]);
        rest.extend_from_slice(&idx[k..]);
    }
    rest.sort_unstable();
    held.sort_unstable();
    (rest, held)
}

/// Toy bags of `dim`-wide standard Gaussian instances, labels alternating
/// 0, 1. Each positive bag carries one to three instances whose mean is
/// shifted by `shift` on every coordinate.
pub fn separable_bags(count: usize, dim: usize, shift: f64, seed: u64) -> Vec<Bag> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = (i % 2) as u8;
            let n = rng.random_range(8..=24);
            let mut x = Tensor::randn(&[n, dim], 1.0, &mut rng);
            if label == 1 {
                let positives = rng.random_range(1..=3);
                for _ in 0..positives {
                    let r = rng.random_range(0..n);
                    for v in &mut x.data_mut()[r * dim..(r + 1) * dim] {
                        *v += shift;
                    }
                }
            }
            Bag::new(x, label, format!("bag_{i:04}")).expect("non-empty bag")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Files

/// Writes `[N, d]` features as `FEA1`, `u32 N`, `u32 d`, then `f32` LE rows.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let [n, d] = *features.shape() else {
        return Err(Error::Usage(format!("features must be [N, d], got {:?}", features.shape())));
    };
    let mut buf = Vec::with_capacity(12 + 4 * n * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path)?;
    let bad = |m: &str| Error::format("feature file", format!("{}: {m}", path.display()));
    if buf.len() < 12 || &buf[..4] != FEATURE_MAGIC {
        return Err(bad("missing FEA1 header"));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    if buf.len() != 12 + 4 * n * d {
        return Err(bad(&format!("expected {} bytes for {n}x{d}, found {}", 12 + 4 * n * d, buf.len())));
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::from_vec(&[n, d], data))
}

/// `slide_id<TAB>score<TAB>label` per bag.
pub fn write_predictions(path: &Path, bags: &[Bag], scores: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (b, s) in bags.iter().zip(scores) {
        writeln!(w, "{}\t{s}\t{}", b.slide_id, b.label)?;
    }
    w.flush()?;
    Ok(())
}
