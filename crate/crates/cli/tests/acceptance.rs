//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cdnet::complexity;
use cdnet::config::CDNetConfig;
use cdnet::gradcheck::grad_samples;
use cdnet::mil::{self, Bag, MILParams, MilHyper};
use cdnet::model::{attention_map, Arch, Model};
use cdnet::nn::{Bound, ParamStore};
use cdnet::parallel::Exec;
use cdnet::pyramid::{gen_synthetic, synthetic_slides, tile, tile_slides, ImagePyramid, LabeledPair, PatchPair};
use cdnet::ssl::{
    augment_pair, dino_loss, ema_update, embed_pairs, pretrain, AugmentationPolicy, DinoNet, HeadConfig,
    LinearProbe, PretrainOptions, Pretrained,
};
use cdnet::tensor::Tensor;
use cdnet::autodiff::Graph;
use cdnet_cli::{cmd_extract, cmd_gen_data, cmd_pretrain, PretrainArgs, RunConfig};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SSL_EPOCHS: usize = 30;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn noise_pair(cfg: &CDNetConfig, rng: &mut ChaCha8Rng) -> PatchPair {
    let side = cfg.detail_px() as u32;
    let high = RgbImage::from_fn(side, side, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let pyramid = ImagePyramid::from_high(high, cfg.mag_ratio() as u32).unwrap();
    tile(&pyramid, cfg.patch_px() as u32).unwrap().remove(0)
}

fn perturb(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..store.len() {
        let noise = Tensor::randn(store.tensor(i).shape(), std, &mut rng);
        store.tensor_mut(i).add_assign(&noise);
    }
}

fn complexity_table() -> Outcome {
    let reports = complexity::comparison(&CDNetConfig::reference()).map_err(|e| e.to_string())?;
    let tokens: Vec<u64> = reports.iter().map(|r| r.tokens()).collect();
    let pairs: Vec<u64> = reports.iter().map(|r| r.sa_pairs).collect();
    let ratio = complexity::speedup(&reports[1], &reports[2]).map_err(|e| e.to_string())?.value();
    let table = cdnet_cli::cmd_complexity(&["reference".into()]).map_err(|e| e.to_string())?;
    check(
        tokens == [196, 3136, 3332] && pairs == [38_416, 9_834_496, 88_592] && ratio >= 100.0
            && ["38416", "9834496", "88592"].iter().all(|s| table.contains(s)),
        format!("tokens {tokens:?}, pairs {pairs:?}, ratio {ratio:.1}"),
    )
}

fn zero_fusion() -> Outcome {
    let cfg = CDNetConfig::toy();
    let (model, mut store) = Model::init(cfg, Arch::CdNet, 1).unwrap();
    perturb(&mut store, 0.2, 2);
    for i in model.fusion_params() {
        let shape = store.tensor(i).shape().to_vec();
        *store.tensor_mut(i) = Tensor::zeros(&shape);
    }
    let (vit, mut vs) = Model::init(cfg, Arch::Vit, 3).unwrap();
    let names: Vec<String> = vs.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        vs.set(&n, store.get(&n).unwrap().clone()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pair = noise_pair(&cfg, &mut rng);
        let a = model.forward(&store, &pair).map_err(|e| e.to_string())?;
        let b = vit.vit_forward(&vs, &pair.context).map_err(|e| e.to_string())?;
        worst = worst.max(a.embedding.max_abs_diff(&b.embedding));
    }
    check(worst <= 1e-12, format!("max abs diff {worst:e} over 20 inputs"))
}

fn gradient_check() -> Outcome {
    let cfg = CDNetConfig::toy();
    let head = HeadConfig {
        hidden: 16,
        bottleneck: 8,
        k: 12,
    };
    let (net, store) = DinoNet::init(cfg, Arch::CdNet, head, 5).unwrap();
    let mut student = store.clone();
    perturb(&mut student, 0.1, 6);
    let mut teacher = store.clone();
    perturb(&mut teacher, 0.1, 8);
    let slide = gen_synthetic(3, 1, 128, 4).unwrap();
    let pair = tile(&slide, 64).unwrap().swap_remove(3);
    let (v1, v2) = augment_pair(&pair, &AugmentationPolicy::default(), 9);
    let t1 = net.infer_logits(&teacher, &v1).unwrap();
    let t2 = net.infer_logits(&teacher, &v2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let center = Tensor::from_vec(&[head.k], (0..head.k).map(|_| rng.random_range(-0.1..0.1)).collect());
    let samples = grad_samples(
        |g, ids| {
            let p = Bound::from_nodes(ids.to_vec());
            let s1 = net.logits(g, &p, &v1)?;
            let s2 = net.logits(g, &p, &v2)?;
            let c1 = g.constant(t1.reshape(&[1, head.k])?);
            let c2 = g.constant(t2.reshape(&[1, head.k])?);
            let a = dino_loss(g, s1, c2, 0.1, 0.04, &center)?;
            let b = dino_loss(g, s2, c1, 0.1, 0.04, &center)?;
            let both = g.add(a, b)?;
            Ok(g.scale(both, 0.5))
        },
        student.tensors(),
        1e-5,
        40,
        11,
    )
    .map_err(|e| e.to_string())?;
    let informative = samples.iter().filter(|s| s.analytic.abs() > 1e-6).count();
    let worst = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    check(
        informative >= 20 && worst <= 1e-4,
        format!("{} coordinates ({informative} informative), max rel error {worst:.2e}", samples.len()),
    )
}

fn shape_contract() -> Outcome {
    let cfg = CDNetConfig::reference();
    let (model, store) = Model::init(cfg, Arch::CdNet, 1).unwrap();
    let pair = noise_pair(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let tokens = model.token_state(&store, &pair, 0).map_err(|e| e.to_string())?;
    let c = tokens.c.shape().to_vec();
    let d = tokens.d.as_ref().map(|d| d.shape().to_vec()).unwrap_or_default();
    let out = model.forward(&store, &pair).map_err(|e| e.to_string())?;
    let map = attention_map(&out.context_attn, cfg.depth).map_err(|e| e.to_string())?;
    let q_ok = cfg.q == 4 * cfg.p && cfg.mag_ratio() == 4;
    check(
        c == [197, 384] && d == [196, 16, 24] && map.shape() == [14, 14] && q_ok,
        format!("C {c:?}, D {d:?}, map {:?}, q {} = 4·{}", map.shape(), cfg.q, cfg.p),
    )
}

fn dino_mechanics() -> Outcome {
    let mut student = ParamStore::new();
    student.add("w", Tensor::from_vec(&[3], vec![4.0, -1.0, 0.5]), true);
    let mut teacher = ParamStore::new();
    teacher.add("w", Tensor::from_vec(&[3], vec![2.0, 7.0, -3.0]), true);
    let mut one = teacher.clone();
    ema_update(&mut one, &student, 1.0).unwrap();
    let mut zero = teacher.clone();
    ema_update(&mut zero, &student, 0.0).unwrap();
    let edges = one.tensors() == teacher.tensors() && zero.tensors() == student.tensors();

    let k = HeadConfig::toy().k;
    let mut g = Graph::new();
    let s = g.param(Tensor::zeros(&[1, k]));
    let t = g.constant(Tensor::zeros(&[1, k]));
    let loss = dino_loss(&mut g, s, t, 0.1, 0.04, &Tensor::zeros(&[k])).unwrap();
    let uniform_err = (g.value(loss).item() - (k as f64).ln()).abs();

    let cfg = CDNetConfig::toy();
    let (net, student) = DinoNet::init(cfg, Arch::CdNet, HeadConfig::toy(), 1).unwrap();
    let mut teacher = student.clone();
    perturb(&mut teacher, 0.05, 2);
    let pair = tile(&gen_synthetic(4, 1, 64, 4).unwrap(), 64).unwrap().remove(0);
    let mut g = Graph::new();
    let ps = student.bind(&mut g);
    let pt = teacher.bind(&mut g);
    let s = net.logits(&mut g, &ps, &pair).unwrap();
    let t = net.logits(&mut g, &pt, &pair).unwrap();
    let l = dino_loss(&mut g, s, t, 0.1, 0.04, &Tensor::full(&[k], 0.01)).unwrap();
    g.backward(l).unwrap();
    let teacher_zero = pt.nodes().iter().all(|&id| g.grad(id).data().iter().all(|&v| v == 0.0));
    let student_live = ps.nodes().iter().any(|&id| g.grad(id).data().iter().any(|&v| v != 0.0));
    check(
        edges && uniform_err <= 1e-10 && teacher_zero && student_live,
        format!("EMA edges exact {edges}, |loss − ln K| {uniform_err:.1e}, teacher grads zero {teacher_zero}"),
    )
}

/// Pretrained backbones shared by the representation and MIL comparisons.
struct Pretraining {
    cdnet: Pretrained,
    vit: Option<Pretrained>,
    pairs: usize,
    secs: f64,
}

fn ssl_pairs() -> Vec<LabeledPair> {
    let slides = synthetic_slides(101, 64, 256, 4, Exec::default()).unwrap();
    tile_slides(&slides, 64, true).unwrap()
}

fn run_pretrain(pairs: &[LabeledPair], arch: Arch) -> Pretrained {
    let opts = PretrainOptions {
        epochs: SSL_EPOCHS,
        ..Default::default()
    };
    pretrain(pairs, CDNetConfig::toy(), arch, &opts, 7).unwrap()
}

fn representation(pre: &Pretraining) -> Outcome {
    let test_slides = synthetic_slides(202, 10, 256, 4, Exec::default()).unwrap();
    let test = tile_slides(&test_slides, 64, true).unwrap();
    let train = ssl_pairs();
    let model = &pre.cdnet.net.model;
    let store = &pre.cdnet.student;
    let embed = |ps: &[LabeledPair]| {
        let refs: Vec<&PatchPair> = ps.iter().map(|p| &p.pair).collect();
        embed_pairs(model, store, &refs, Exec::default()).unwrap()
    };
    let labels = |ps: &[LabeledPair]| ps.iter().map(|p| p.label).collect::<Vec<u8>>();
    let probe = LinearProbe::fit(&embed(&train), &labels(&train)).map_err(|e| e.to_string())?;
    let acc = probe.accuracy(&embed(&test), &labels(&test));
    let means = pre.cdnet.epoch_means();
    let (first, last) = (means[0], *means.last().unwrap());
    check(
        pre.pairs >= 2000 && means.len() >= 20 && acc >= 0.90 && last < first,
        format!(
            "{} pairs, {} epochs in {:.0} s, loss {first:.3} → {last:.3}, probe accuracy {acc:.3} on {} held-out patches",
            pre.pairs,
            means.len(),
            pre.secs,
            test.len()
        ),
    )
}

fn separable_mil() -> Outcome {
    let bags = mil::separable_bags(200, 32, 1.0, 17);
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let (train_idx, test_idx) = mil::stratified_split(&labels, 0.3, 18);
    let train: Vec<Bag> = train_idx.iter().map(|&i| bags[i].clone()).collect();
    let test: Vec<Bag> = test_idx.iter().map(|&i| bags[i].clone()).collect();
    let hyper = MilHyper {
        seed: 19,
        ..MilHyper::default()
    };
    let trained = mil::train_mil(&train, &test, MILParams::init(32, mil::D_QUERY, mil::D_VALUE, 20), &hyper)
        .map_err(|e| e.to_string())?;
    let scores = mil::predict(&test, &trained.params, Exec::default()).map_err(|e| e.to_string())?;
    let test_labels: Vec<u8> = test.iter().map(|b| b.label).collect();
    let auc = mil::auc(&scores, &test_labels).unwrap_or(0.0);
    let h = &trained.history;
    let loss_down = h.last().unwrap().train_loss < h[0].train_loss;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut invariant = true;
    for _ in 0..50 {
        let bag = &test[rng.random_range(0..test.len())];
        let base = mil::bag_forward(bag, &trained.params).unwrap();
        let mut order: Vec<usize> = (0..bag.len()).collect();
        order.shuffle(&mut rng);
        let rows: Vec<f64> = order.iter().flat_map(|&i| bag.features.row(i).to_vec()).collect();
        let shuffled = Bag::new(Tensor::from_vec(bag.features.shape(), rows), bag.label, "p").unwrap();
        invariant &= mil::bag_forward(&shuffled, &trained.params).unwrap().score.to_bits() == base.score.to_bits();
    }
    check(
        auc >= 0.95 && loss_down && invariant && h.len() == 40,
        format!("held-out AUC {auc:.3} on {} bags, loss decreased {loss_down}, 50 permutations exact {invariant}", test.len()),
    )
}

fn feature_bags(pre: &Pretrained, slides: &[cdnet::pyramid::SyntheticSlide]) -> Vec<Bag> {
    slides
        .iter()
        .map(|s| {
            let pairs = tile_slides(std::slice::from_ref(s), 64, true).unwrap();
            let refs: Vec<&PatchPair> = pairs.iter().map(|p| &p.pair).collect();
            let feats = embed_pairs(&pre.net.model, &pre.student, &refs, Exec::default()).unwrap();
            let d = feats[0].numel();
            let data: Vec<f64> = feats.iter().flat_map(|t| t.data().iter().copied()).collect();
            Bag::new(Tensor::from_vec(&[feats.len(), d], data), s.label, s.slide_id.clone()).unwrap()
        })
        .collect()
}

fn cdnet_beats_vit(pre: &Pretraining) -> Outcome {
    let vit = pre.vit.as_ref().expect("ViT pretraining");
    let slides = synthetic_slides(303, 40, 256, 4, Exec::default()).unwrap();
    let cd_bags = feature_bags(&pre.cdnet, &slides);
    let vit_bags = feature_bags(vit, &slides);
    let mut cd = Vec::new();
    let mut vt = Vec::new();
    for seed in [1u64, 2, 3] {
        let rc = RunConfig {
            seed,
            ..RunConfig::toy(Default::default())
        };
        let hyper = MilHyper::default();
        cd.push(cdnet_cli::mil_on_bags(&rc, &cd_bags, &hyper).map_err(|e| e.to_string())?.auc.unwrap());
        vt.push(cdnet_cli::mil_on_bags(&rc, &vit_bags, &hyper).map_err(|e| e.to_string())?.auc.unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&cd), mean(&vt));
    check(
        a >= b,
        format!("mean MIL AUC over 3 splits: CD-Net {a:.3} {cd:.3?}, ViT {b:.3} {vt:.3?}"),
    )
}

fn run_pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let data = RunConfig {
        seed: 5,
        ..RunConfig::toy(root.join("data"))
    };
    let manifest = cmd_gen_data(&data, 2, None).unwrap();
    let train = RunConfig {
        seed: 5,
        ..RunConfig::toy(root.join("pretrain"))
    };
    let args = PretrainArgs {
        epochs: 1,
        ..PretrainArgs::default()
    };
    let ck = cmd_pretrain(&train, &manifest, &args).unwrap();
    let out = RunConfig {
        seed: 5,
        ..RunConfig::toy(root.join("features"))
    };
    let e = cmd_extract(&out, &manifest, &ck).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&e.dir)
        .unwrap()
        .map(|f| f.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_pipeline(a.path());
    let fb = run_pipeline(b.path());
    let features = fa.iter().filter(|f| f.0.ends_with(".fea")).count();
    check(
        features > 0 && fa == fb,
        format!("{} files ({features} feature files) byte-identical {}", fa.len(), fa == fb),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {tag} [{name}] {detail} ({secs:.1} s)");
    };
    let t = Instant::now();
    report(1, "complexity", t, complexity_table());
    let t = Instant::now();
    report(2, "zero-fusion equivalence", t, zero_fusion());
    let t = Instant::now();
    report(3, "gradient check", t, gradient_check());
    let t = Instant::now();
    report(4, "shape contract", t, shape_contract());
    let t = Instant::now();
    report(5, "self-distillation mechanics", t, dino_mechanics());

    let t = Instant::now();
    let pairs = ssl_pairs();
    let cdnet = run_pretrain(&pairs, Arch::CdNet);
    let mut pre = Pretraining {
        cdnet,
        vit: None,
        pairs: pairs.len(),
        secs: t.elapsed().as_secs_f64(),
    };
    report(6, "representation learning", t, representation(&pre));
    let t = Instant::now();
    report(7, "MIL on separable bags", t, separable_mil());
    let t = Instant::now();
    pre.vit = Some(run_pretrain(&pairs, Arch::Vit));
    report(8, "CD-Net vs ViT features", t, cdnet_beats_vit(&pre));
    let t = Instant::now();
    report(9, "pipeline determinism", t, determinism());

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
