//! Self-distillation pretraining: a student network matches the centered,
//! sharpened output distribution of an EMA teacher across two augmented views
//! of each patch pair.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::CDNetConfig;
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::optim::{cosine_ramp, warmup_cosine, AdamW};
use crate::parallel::{self, Exec};
use crate::pyramid::{LabeledPair, PatchPair, WHITE};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Augmentation

/// Random view policy. Geometric operations act on both levels with offsets
/// scaled by the magnification ratio, so views stay aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    /// Range of the kept window's area as a fraction of the patch. Pixels
    /// outside the window are set to background.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `±brightness` (fraction of 255).
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Independent per-channel shift drawn from `±channel_shift`.
    pub channel_shift: f64,
    pub grayscale_prob: f64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            channel_shift: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.4, 1.0),
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            channel_shift: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

fn flip_h(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Keeps `[x0, x0+w) × [y0, y0+h)` and whitens everything else.
fn mask_outside(img: &RgbImage, x0: u32, y0: u32, w: u32, h: u32) -> RgbImage {
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if x < x0 || x >= x0 + w || y < y0 || y >= y0 + h {
            *px = WHITE;
        }
    }
    out
}

fn jitter(img: &RgbImage, shift: [f64; 3], factor: f64, gray: bool) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = ((px.0[i] as f64 - 127.5) * factor + 127.5 + shift[i] * 255.0).clamp(0.0, 255.0);
        }
        if gray {
            let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            c = [y; 3];
        }
        *px = Rgb(c.map(|v| v.round() as u8));
    }
    out
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn augment_view(pair: &PatchPair, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> PatchPair {
    let side = pair.patch_px();
    let r = pair.mag_ratio();
    let (lo, hi) = policy.crop_scale;
    let (lo, hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
    let area = if hi > lo { rng.random_range(lo..=hi) } else { hi };
    let aspect = if hi > lo || lo < 1.0 {
        (rng.random_range(-(4.0f64 / 3.0).ln()..=(4.0f64 / 3.0).ln())).exp()
    } else {
        1.0
    };
    let w = ((area * aspect).sqrt() * side as f64).round().clamp(1.0, side as f64) as u32;
    let h = ((area / aspect).sqrt() * side as f64).round().clamp(1.0, side as f64) as u32;
    let x0 = rng.random_range(0..=side - w);
    let y0 = rng.random_range(0..=side - h);
    let flip = rng.random::<f64>() < policy.flip_prob;
    let brightness = symmetric(rng, policy.brightness);
    let factor = 1.0 + symmetric(rng, policy.contrast);
    let shift: [f64; 3] = std::array::from_fn(|_| brightness + symmetric(rng, policy.channel_shift));
    let gray = policy.grayscale_prob > 0.0 && rng.random::<f64>() < policy.grayscale_prob;

    let mut ctx = pair.context.clone();
    let mut det = pair.detail.clone();
    if (w, h) != (side, side) {
        ctx = mask_outside(&ctx, x0, y0, w, h);
        det = mask_outside(&det, x0 * r, y0 * r, w * r, h * r);
    }
    if flip {
        ctx = flip_h(&ctx);
        det = flip_h(&det);
    }
    if shift != [0.0; 3] || factor != 1.0 || gray {
        ctx = jitter(&ctx, shift, factor, gray);
        det = jitter(&det, shift, factor, gray);
    }
    PatchPair {
        context: ctx,
        detail: det,
        origin: pair.origin,
    }
}

/// Two independently augmented views of `pair`, reproducible from `seed`.
pub fn augment_pair(pair: &PatchPair, policy: &AugmentationPolicy, seed: u64) -> (PatchPair, PatchPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment_view(pair, policy, &mut rng);
    let b = augment_view(pair, policy, &mut rng);
    (a, b)
}

// ---------------------------------------------------------------------------
// Projection head and loss

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Number of prototypes.
    pub k: usize,
}

impl HeadConfig {
    pub fn toy() -> Self {
        HeadConfig {
            hidden: 64,
            bottleneck: 32,
            k: 256,
        }
    }
}

/// Three-layer MLP to a unit-norm bottleneck, then cosine scores against `k`
/// unit-norm prototypes.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHead {
    pub config: HeadConfig,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    /// Prototype directions `[k, bottleneck]`, normalized on use.
    pub proto: usize,
}

impl ProjectionHead {
    pub fn build<R: Rng + ?Sized>(
        config: HeadConfig,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let HeadConfig { hidden, bottleneck, k } = config;
        ProjectionHead {
            config,
            fc1: Linear::new(store, "head.fc1", dim, hidden, Init::FanIn, rng),
            fc2: Linear::new(store, "head.fc2", hidden, hidden, Init::FanIn, rng),
            fc3: Linear::new(store, "head.fc3", hidden, bottleneck, Init::FanIn, rng),
            proto: store.add(
                "head.proto",
                Tensor::randn(&[k, bottleneck], 1.0 / (bottleneck as f64).sqrt(), rng),
                true,
            ),
        }
    }

    /// Logits `[1, k]` from an embedding `[dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let dim = g.value(x).numel();
        let x = g.reshape(x, &[1, dim])?;
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        let h = g.gelu(h);
        let z = self.fc3.forward(g, p, h)?;
        let z = g.l2_normalize_rows(z);
        let w = g.l2_normalize_rows(p[self.proto]);
        let wt = g.transpose(w)?;
        g.matmul(z, wt)
    }
}

/// Backbone plus projection head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct DinoNet {
    pub model: Model,
    pub head: ProjectionHead,
}

impl DinoNet {
    pub fn init(config: CDNetConfig, arch: Arch, head: HeadConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::build(config, arch, &mut store, &mut rng)?;
        let head = ProjectionHead::build(head, config.dim1, &mut store, &mut rng);
        Ok((DinoNet { model, head }, store))
    }

    /// Logits node `[1, k]` of one view.
    pub fn logits(&self, g: &mut Graph, p: &Bound, pair: &PatchPair) -> Result<NodeId> {
        let out = self.model.forward_graph(g, p, pair)?;
        self.head.forward(g, p, out.embedding)
    }

    /// Logits of one view with inference semantics.
    pub fn infer_logits(&self, store: &ParamStore, pair: &PatchPair) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let l = self.logits(&mut g, &p, pair)?;
        Ok(g.value(l).reshape(&[self.head.config.k])?)
    }
}

/// Teacher target `softmax((t − center)/τ_t)`.
pub fn teacher_probs(teacher_logits: &[f64], center: &[f64], tau_t: f64) -> Vec<f64> {
    let z: Vec<f64> = teacher_logits
        .iter()
        .zip(center)
        .map(|(t, c)| (t - c) / tau_t)
        .collect();
    crate::autodiff::softmax_rows(&z, z.len())
}

/// Cross-entropy `−Σ P_t log P_s` with `P_s = softmax(student/τ_s)`. The
/// teacher logits are detached, so no gradient reaches the teacher branch.
pub fn dino_loss(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_logits: NodeId,
    tau_s: f64,
    tau_t: f64,
    center: &Tensor,
) -> Result<NodeId> {
    let t = g.detach(teacher_logits);
    let tv = g.value(t).clone();
    if tv.numel() != center.numel() || g.value(student_logits).numel() != tv.numel() {
        return Err(Error::Dimension {
            op: "dino_loss",
            lhs: g.value(student_logits).shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    let pt = teacher_probs(tv.data(), center.data(), tau_t);
    let pt = g.constant(Tensor::from_vec(g.value(student_logits).shape(), pt));
    let s = g.scale(student_logits, 1.0 / tau_s);
    let logp = g.log_softmax(s);
    let prod = g.mul(pt, logp)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0))
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    teacher.check_same_layout(student)?;
    for i in 0..teacher.len() {
        let s = student.tensor(i).data();
        for (t, &sv) in teacher.tensor_mut(i).data_mut().iter_mut().zip(s) {
            *t = momentum * *t + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// `c ← m·c + (1−m)·mean(batch)`.
pub fn center_update(center: &Tensor, batch: &[Tensor], momentum: f64) -> Tensor {
    if batch.is_empty() {
        return center.clone();
    }
    let mut mean = vec![0.0; center.numel()];
    for t in batch {
        for (m, v) in mean.iter_mut().zip(t.data()) {
            *m += v;
        }
    }
    let n = batch.len() as f64;
    let data = center
        .data()
        .iter()
        .zip(&mean)
        .map(|(c, s)| momentum * c + (1.0 - momentum) * (s / n))
        .collect();
    Tensor::from_vec(center.shape(), data)
}

/// EMA copy of the student plus the output center.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ParamStore,
    pub center: Tensor,
    pub ema_momentum: f64,
    pub center_momentum: f64,
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate before batch scaling; the peak rate is
    /// `base_lr · batch_size / 256` unless `peak_lr` is set.
    pub base_lr: f64,
    pub peak_lr: Option<f64>,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// EMA momentum ramps from `.0` to `.1` on a cosine.
    pub ema_momentum: (f64, f64),
    pub head: HeadConfig,
    pub policy: AugmentationPolicy,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Loss log, checkpoints and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub exec: Exec,
    /// Starting student parameters; a fresh init from the seed when absent.
    pub init: Option<ParamStore>,
    /// Std of the truncated normal that replaces the zero init of residual
    /// output projections in a fresh student (0 keeps them at zero).
    pub residual_init_std: f64,
    /// Same for the fusion projections.
    pub fusion_init_std: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 20,
            batch_size: 32,
            base_lr: 5e-4,
            peak_lr: None,
            min_lr: 1e-6,
            warmup_epochs: 1,
            weight_decay: 0.04,
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            ema_momentum: (0.996, 1.0),
            head: HeadConfig::toy(),
            policy: AugmentationPolicy::default(),
            max_steps: None,
            out_dir: None,
            checkpoint_every: 0,
            exec: Exec::default(),
            init: None,
            residual_init_std: 0.02,
            fusion_init_std: 0.5,
        }
    }
}

impl PretrainOptions {
    pub fn peak_lr(&self) -> f64 {
        self.peak_lr
            .unwrap_or(self.base_lr * self.batch_size as f64 / 256.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub ema_momentum: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub net: DinoNet,
    pub student: ParamStore,
    pub teacher: TeacherState,
    pub log: Vec<LossRecord>,
    pub steps_per_epoch: usize,
}

impl Pretrained {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointMeta {
            arch: self.net.model.arch.name().into(),
            step: self.log.len(),
            model: self.net.model.config,
            head: Some(self.net.head.config),
        });
        ck.push_store("student", &self.student);
        ck.push_store("teacher", &self.teacher.params);
        ck.push("center", &self.teacher.center);
        ck
    }

    /// Mean loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.log, self.steps_per_epoch)
    }
}

pub fn epoch_means(log: &[LossRecord], steps_per_epoch: usize) -> Vec<f64> {
    log.chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    teacher_logits: [Tensor; 2],
}

fn sample_step(
    net: &DinoNet,
    student: &ParamStore,
    teacher: &ParamStore,
    center: &Tensor,
    pair: &PatchPair,
    aug_seed: u64,
    opts: &PretrainOptions,
    weight: f64,
) -> Result<SampleResult> {
    let (v1, v2) = augment_pair(pair, &opts.policy, aug_seed);
    let t1 = net.infer_logits(teacher, &v1)?;
    let t2 = net.infer_logits(teacher, &v2)?;
    let mut g = Graph::new();
    let p = student.bind(&mut g);
    let s1 = net.logits(&mut g, &p, &v1)?;
    let s2 = net.logits(&mut g, &p, &v2)?;
    let shape = g.value(s1).shape().to_vec();
    let c1 = g.constant(t1.reshape(&shape)?);
    let c2 = g.constant(t2.reshape(&shape)?);
    let a = dino_loss(&mut g, s1, c2, opts.tau_s, opts.tau_t, center)?;
    let b = dino_loss(&mut g, s2, c1, opts.tau_s, opts.tau_t, center)?;
    let both = g.add(a, b)?;
    let loss = g.scale(both, 0.5 * weight);
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok(SampleResult {
        loss: value,
        grads: p.take_grads(&mut g),
        teacher_logits: [t1, t2],
    })
}

/// Mean teacher logits over the unaugmented `batch`. Starting the center
/// here instead of at zero keeps the first steps from handing every input the
/// same sharpened target.
fn initial_center(
    net: &DinoNet,
    teacher: &ParamStore,
    pairs: &[LabeledPair],
    batch: &[usize],
    exec: Exec,
) -> Result<Tensor> {
    let logits = parallel::map(exec, batch, |&i| net.infer_logits(teacher, &pairs[i].pair))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(center_update(&Tensor::zeros(&[net.head.config.k]), &logits, 0.0))
}

fn write_log(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in log {
        writeln!(w, "{}\t{}\t{}\t{}", r.step, r.loss, r.ema_momentum, r.lr)?;
    }
    w.flush()?;
    Ok(())
}

/// Student parameters at step 0: `opts.init` when given, otherwise a fresh
/// init from `seed` whose zero-initialized residual output and fusion
/// projections are redrawn from truncated normals. With those at zero the
/// CLS output does not depend on the input and the detail path is cut off.
pub fn initial_student(
    config: CDNetConfig,
    arch: Arch,
    opts: &PretrainOptions,
    seed: u64,
) -> Result<(DinoNet, ParamStore)> {
    let (net, mut store) = DinoNet::init(config, arch, opts.head, seed)?;
    if let Some(init) = &opts.init {
        store.check_same_layout(init)?;
        return Ok((net, init.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut redraw = |idx: usize, std: f64, store: &mut ParamStore| {
        if std > 0.0 {
            let shape = store.tensor(idx).shape().to_vec();
            *store.tensor_mut(idx) = Tensor::trunc_normal(&shape, std, &mut rng);
        }
    };
    for b in &net.model.blocks {
        for blk in [Some(b.context), b.detail].into_iter().flatten() {
            redraw(blk.attn.o.w, opts.residual_init_std, &mut store);
            redraw(blk.mlp.fc2.w, opts.residual_init_std, &mut store);
        }
        if let Some(f) = b.fuse {
            redraw(f.w, opts.fusion_init_std, &mut store);
        }
    }
    Ok((net, store))
}

/// Self-distillation pretraining on `pairs`. Each step augments a batch,
/// runs the teacher on both views, averages the symmetric loss over the
/// batch, takes an AdamW step on the student, then updates the teacher by
/// EMA and the center from the teacher outputs.
pub fn pretrain(
    pairs: &[LabeledPair],
    config: CDNetConfig,
    arch: Arch,
    opts: &PretrainOptions,
    seed: u64,
) -> Result<Pretrained> {
    if pairs.is_empty() {
        return Err(Error::Usage("pretraining needs at least one pair".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    let (net, mut student) = initial_student(config, arch, opts, seed)?;
    let mut teacher = TeacherState {
        params: student.clone(),
        center: Tensor::zeros(&[opts.head.k]),
        ema_momentum: opts.ema_momentum.0,
        center_momentum: opts.center_momentum,
    };
    let mut optim = AdamW::new(&student, opts.weight_decay);
    let steps_per_epoch = pairs.len().div_ceil(opts.batch_size);
    let total = opts.epochs * steps_per_epoch;
    let total = opts.max_steps.map_or(total, |m| m.min(total));
    let warmup = opts.warmup_epochs * steps_per_epoch;
    let peak = opts.peak_lr();
    let min_lr = opts.min_lr.min(peak);
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..opts.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
        shuffle.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        for batch in order.chunks(opts.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lr = warmup_cosine(step, total, warmup, peak, min_lr);
            let momentum = cosine_ramp(step, total, opts.ema_momentum.0, opts.ema_momentum.1);
            let mut seeder = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11);
            seeder.set_stream(step as u64);
            let work: Vec<(usize, u64)> = batch.iter().map(|&i| (i, seeder.random())).collect();
            if step == 0 {
                teacher.center = initial_center(&net, &teacher.params, pairs, batch, opts.exec)?;
            }
            let weight = 1.0 / batch.len() as f64;
            let results = parallel::map(opts.exec, &work, |&(i, aug)| {
                sample_step(
                    &net,
                    &student,
                    &teacher.params,
                    &teacher.center,
                    &pairs[i].pair,
                    aug,
                    opts,
                    weight,
                )
            });
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            let mut outputs = Vec::with_capacity(2 * batch.len());
            for r in results {
                let r = r?;
                loss += r.loss;
                match grads.as_mut() {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
                outputs.extend(r.teacher_logits);
            }
            if !loss.is_finite() {
                let pair_ids: Vec<String> = batch.iter().map(|&i| pairs[i].pair_id.clone()).collect();
                if let Some(dir) = &opts.out_dir {
                    let dump = format!("step\t{step}\nloss\t{loss}\npairs\t{}\n", pair_ids.join(","));
                    fs::write(dir.join("nonfinite_batch.txt"), dump)?;
                    write_log(&dir.join("loss.tsv"), &log)?;
                }
                return Err(Error::NonFiniteLoss { step, loss, pair_ids });
            }
            optim.step(&mut student, &grads.expect("non-empty batch"), lr);
            ema_update(&mut teacher.params, &student, momentum)?;
            teacher.ema_momentum = momentum;
            teacher.center = center_update(&teacher.center, &outputs, teacher.center_momentum);
            log.push(LossRecord {
                step,
                loss,
                ema_momentum: momentum,
                lr,
            });
            step += 1;
        }
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0 {
                let snapshot = Pretrained {
                    net: net.clone(),
                    student: student.clone(),
                    teacher: teacher.clone(),
                    log: log.clone(),
                    steps_per_epoch,
                };
                snapshot
                    .checkpoint()
                    .save(&dir.join(format!("checkpoint_epoch{:03}.cdn", epoch + 1)))?;
            }
        }
    }
    let out = Pretrained {
        net,
        student,
        teacher,
        log,
        steps_per_epoch,
    };
    if let Some(dir) = &opts.out_dir {
        write_log(&dir.join("loss.tsv"), &out.log)?;
        out.checkpoint().save(&dir.join("checkpoint.cdn"))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frozen features and linear probe

/// CLS embeddings of `pairs` under `store`, in input order.
pub fn embed_pairs(model: &Model, store: &ParamStore, pairs: &[&PatchPair], exec: Exec) -> Result<Vec<Tensor>> {
    parallel::map(exec, pairs, |p| model.forward(store, p).map(|o| o.embedding))
        .into_iter()
        .collect()
}

const PROBE_NEWTON_STEPS: usize = 50;

/// Solves `a·x = b` for a symmetric positive-definite `a` (overwritten by its
/// Cholesky factor).
fn solve_spd(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Integrity("probe Hessian is not positive definite".into()));
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / diag;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Ok(y)
}

/// Standardized-feature logistic regression with a small L2 penalty, fit by
/// Newton's method.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LinearProbe {
    pub fn fit(features: &[Tensor], labels: &[u8]) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Usage("probe needs one label per feature vector".into()));
        }
        let d = features[0].numel();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(f.data()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = 1.0 / s.sqrt().max(1e-12);
        }
        let mut probe = LinearProbe {
            mean,
            scale,
            w: vec![0.0; d],
            b: 0.0,
        };
        // Newton iterations on the L2-penalized logistic loss, over the
        // augmented vector [w, b] (the bias is not penalized).
        let xs: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                let mut x = probe.standardize(f);
                x.push(1.0);
                x
            })
            .collect();
        let dim = d + 1;
        let l2 = 1e-3;
        let mut theta = vec![0.0; dim];
        for _ in 0..PROBE_NEWTON_STEPS {
            let mut grad = vec![0.0; dim];
            let mut hess = vec![0.0; dim * dim];
            for (x, &y) in xs.iter().zip(labels) {
                let z: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                let w = p * (1.0 - p);
                for i in 0..dim {
                    grad[i] += (p - y as f64) * x[i] / n;
                    for j in 0..=i {
                        hess[i * dim + j] += w * x[i] * x[j] / n;
                    }
                }
            }
            for i in 0..dim {
                for j in 0..i {
                    hess[j * dim + i] = hess[i * dim + j];
                }
                if i < d {
                    grad[i] += l2 * theta[i];
                    hess[i * dim + i] += l2;
                } else {
                    hess[i * dim + i] += 1e-9;
                }
            }
            let step = solve_spd(&mut hess, &grad, dim)?;
            let size: f64 = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (t, s) in theta.iter_mut().zip(&step) {
                *t -= s;
            }
            if size < 1e-10 {
                break;
            }
        }
        probe.b = theta[d];
        theta.truncate(d);
        probe.w = theta;
        Ok(probe)
    }

    fn standardize(&self, f: &Tensor) -> Vec<f64> {
        f.data()
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn predict(&self, f: &Tensor) -> u8 {
        let x = self.standardize(f);
        let z = self.b + x.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>();
        u8::from(z > 0.0)
    }

    pub fn accuracy(&self, features: &[Tensor], labels: &[u8]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| self.predict(f) == y)
            .count();
        hits as f64 / features.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{box_downsample, gen_synthetic, tile};

    fn toy_pair(seed: u64) -> PatchPair {
        tile(&gen_synthetic(seed, 1, 64, 4).unwrap(), 64).unwrap().remove(0)
    }

    #[test]
    fn identity_policy_returns_input() {
        let pair = toy_pair(1);
        let (a, b) = augment_pair(&pair, &AugmentationPolicy::identity(), 9);
        assert_eq!(a, pair);
        assert_eq!(b, pair);
    }

    #[test]
    fn geometric_views_stay_aligned() {
        let pair = toy_pair(2);
        let policy = AugmentationPolicy {
            brightness: 0.0,
            contrast: 0.0,
            channel_shift: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.5,
            ..AugmentationPolicy::default()
        };
        for seed in 0..20 {
            let (a, b) = augment_pair(&pair, &policy, seed);
            assert_eq!(box_downsample(&a.detail, 4), a.context);
            assert_eq!(box_downsample(&b.detail, 4), b.context);
        }
        let flip = AugmentationPolicy {
            flip_prob: 1.0,
            ..AugmentationPolicy::identity()
        };
        let (a, _) = augment_pair(&pair, &flip, 0);
        assert_eq!(a.context, flip_h(&pair.context));
        assert_eq!(a.detail, flip_h(&pair.detail));
        assert!(a.is_aligned());
    }

    #[test]
    fn colour_jitter_acts_on_both_levels() {
        let pair = toy_pair(3);
        let gray = AugmentationPolicy {
            grayscale_prob: 1.0,
            ..AugmentationPolicy::identity()
        };
        let (a, _) = augment_pair(&pair, &gray, 1);
        for img in [&a.context, &a.detail] {
            assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
        }
        let shift = AugmentationPolicy {
            channel_shift: 0.2,
            ..AugmentationPolicy::identity()
        };
        let (a, _) = augment_pair(&pair, &shift, 2);
        // Mid-range pixels are not clamped, so the shift shows exactly.
        let offset = |src: &RgbImage, dst: &RgbImage, ch: usize| {
            src.pixels()
                .zip(dst.pixels())
                .find(|(s, _)| (60..=195).contains(&s[ch]))
                .map(|(s, d)| d[ch] as i32 - s[ch] as i32)
                .unwrap()
        };
        for ch in 0..3 {
            assert_eq!(offset(&pair.context, &a.context, ch), offset(&pair.detail, &a.detail, ch));
        }
        assert_ne!(a.context, pair.context);
    }

    #[test]
    fn augmentation_is_reproducible() {
        let pair = toy_pair(3);
        let p = AugmentationPolicy::default();
        assert_eq!(augment_pair(&pair, &p, 5), augment_pair(&pair, &p, 5));
        assert_ne!(augment_pair(&pair, &p, 5).0, augment_pair(&pair, &p, 6).0);
    }

    fn loss_value(s: &[f64], t: &[f64], tau_s: f64, tau_t: f64, c: &[f64]) -> f64 {
        let mut g = Graph::new();
        let sn = g.param(Tensor::from_vec(&[1, s.len()], s.to_vec()));
        let tn = g.constant(Tensor::from_vec(&[1, t.len()], t.to_vec()));
        let center = Tensor::from_vec(&[c.len()], c.to_vec());
        let l = dino_loss(&mut g, sn, tn, tau_s, tau_t, &center).unwrap();
        g.value(l).item()
    }

    #[test]
    fn uniform_loss_is_ln_k() {
        let l = loss_value(&[0.0; 4], &[0.0; 4], 0.1, 0.1, &[0.0; 4]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_teacher_gives_negative_log_prob() {
        let s = [0.3, -1.2, 2.0, 0.1];
        let t = [0.0, 0.0, 50.0, 0.0];
        let l = loss_value(&s, &t, 1.0, 0.04, &[0.0; 4]);
        let lse = s.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((l - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (ts, tt) = (0.1, 0.04);
        // Direct evaluation with explicit log-sum-exp on each side.
        let zt: Vec<f64> = t.iter().zip(&c).map(|(a, b)| (a - b) / tt).collect();
        let mt = zt.iter().copied().fold(f64::MIN, f64::max);
        let et: Vec<f64> = zt.iter().map(|z| (z - mt).exp()).collect();
        let st: f64 = et.iter().sum();
        let zs: Vec<f64> = s.iter().map(|a| a / ts).collect();
        let ms = zs.iter().copied().fold(f64::MIN, f64::max);
        let lse = ms + zs.iter().map(|z| (z - ms).exp()).sum::<f64>().ln();
        let want: f64 = -(0..8).map(|i| et[i] / st * (zs[i] - lse)).sum::<f64>();
        let got = loss_value(&s, &t, ts, tt, &c);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn teacher_gets_no_gradient() {
        let cfg = CDNetConfig::toy();
        let (net, student) = DinoNet::init(cfg, Arch::CdNet, HeadConfig::toy(), 1).unwrap();
        let teacher = student.clone();
        let pair = toy_pair(4);
        let mut g = Graph::new();
        let ps = student.bind(&mut g);
        let pt = teacher.bind(&mut g);
        let s = net.logits(&mut g, &ps, &pair).unwrap();
        let t = net.logits(&mut g, &pt, &pair).unwrap();
        let center = Tensor::from_vec(&[256], vec![0.01; 256]);
        let l = dino_loss(&mut g, s, t, 0.1, 0.04, &center).unwrap();
        g.backward(l).unwrap();
        for &id in pt.nodes() {
            assert!(g.grad(id).data().iter().all(|&v| v == 0.0));
        }
        assert!(ps.nodes().iter().any(|&id| g.grad(id).data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn ema_edge_cases() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[2], 4.0), true);
        let mut t = ParamStore::new();
        t.add("w", Tensor::full(&[2], 2.0), true);
        let mut a = t.clone();
        ema_update(&mut a, &s, 1.0).unwrap();
        assert_eq!(a.tensor(0), t.tensor(0));
        let mut a = t.clone();
        ema_update(&mut a, &s, 0.0).unwrap();
        assert_eq!(a.tensor(0), s.tensor(0));
        let mut a = t.clone();
        ema_update(&mut a, &s, 0.5).unwrap();
        assert_eq!(a.tensor(0).data(), &[3.0, 3.0]);
        let mut other = ParamStore::new();
        other.add("v", Tensor::full(&[2], 0.0), true);
        assert!(matches!(ema_update(&mut other, &s, 0.5), Err(Error::Integrity(_))));
    }

    #[test]
    fn ema_contracts_toward_fixed_student() {
        let (_, student) = DinoNet::init(CDNetConfig::toy(), Arch::CdNet, HeadConfig::toy(), 1).unwrap();
        let (_, mut teacher) = DinoNet::init(CDNetConfig::toy(), Arch::CdNet, HeadConfig::toy(), 2).unwrap();
        for _ in 0..100 {
            ema_update(&mut teacher, &student, 0.9).unwrap();
        }
        let dist = teacher
            .tensors()
            .iter()
            .zip(student.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        assert!(dist < 1e-3, "{dist}");
    }

    #[test]
    fn center_update_cases() {
        let c = Tensor::from_vec(&[2], vec![1.0, -1.0]);
        let v = Tensor::from_vec(&[2], vec![3.0, 5.0]);
        assert_eq!(center_update(&c, std::slice::from_ref(&v), 1.0), c);
        assert_eq!(center_update(&c, std::slice::from_ref(&v), 0.0), v);
        // Two steps: m²c + m(1−m)a + (1−m)b.
        let (a, b, m) = (v.clone(), Tensor::from_vec(&[2], vec![-2.0, 0.5]), 0.7);
        let got = center_update(&center_update(&c, &[a.clone()], m), &[b.clone()], m);
        for i in 0..2 {
            let want = m * m * c.data()[i] + m * (1.0 - m) * a.data()[i] + (1.0 - m) * b.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn head_bottleneck_is_unit_norm() {
        let (net, store) = DinoNet::init(CDNetConfig::toy(), Arch::CdNet, HeadConfig::toy(), 3).unwrap();
        let pair = toy_pair(5);
        let l = net.infer_logits(&store, &pair).unwrap();
        assert_eq!(l.shape(), &[256]);
        // Cosine scores against unit prototypes.
        assert!(l.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn probe_separates_shifted_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let y = (i % 2) as u8;
            let mut t = Tensor::randn(&[5], 1.0, &mut rng);
            t.data_mut()[0] += 4.0 * y as f64;
            feats.push(t);
            labels.push(y);
        }
        let probe = LinearProbe::fit(&feats[..100], &labels[..100]).unwrap();
        let acc = probe.accuracy(&feats[100..], &labels[100..]);
        assert!(acc > 0.9, "{acc}");
    }

    #[test]
    fn probe_handles_strongly_correlated_features() {
        // 32 near-copies of one latent plus a weak class direction.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let y = (i % 2) as u8;
            let common: f64 = rng.random_range(-3.0..3.0);
            let noise = Tensor::randn(&[32], 0.05, &mut rng);
            let data = (0..32)
                .map(|j| common + noise.data()[j] + if j == 7 { 0.3 * y as f64 } else { 0.0 })
                .collect();
            feats.push(Tensor::from_vec(&[32], data));
            labels.push(y);
        }
        let probe = LinearProbe::fit(&feats[..300], &labels[..300]).unwrap();
        assert!(probe.accuracy(&feats[..300], &labels[..300]) > 0.95);
        assert!(probe.accuracy(&feats[300..], &labels[300..]) > 0.9);
    }
}
