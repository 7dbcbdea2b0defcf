//! Pipeline commands behind the `cdnet` binary: synthetic data generation,
//! self-distillation pretraining, feature extraction, slide-level MIL,
//! attention-map export and cost reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cdnet::checkpoint::Checkpoint;
use cdnet::complexity;
use cdnet::config::CDNetConfig;
use cdnet::mil::{self, Bag, MILParams, MilHyper};
use cdnet::model::{attention_map, Arch, Model};
use cdnet::nn::ParamStore;
use cdnet::parallel::{self, Exec};
use cdnet::pyramid::{
    self, synthetic_slides, tile_slides, tissue_filter, write_ppm, LabeledPair, ManifestRecord,
    PyramidManifest, TISSUE_SATURATION,
};
use cdnet::ssl::{self, PretrainOptions};
use cdnet::{Error, Result};
use image::{GrayImage, Luma};

pub const DEFAULT_SEED: u64 = 20_231_013;
pub const MANIFEST: &str = "manifest.tsv";
pub const LABELS: &str = "labels.tsv";
pub const CHECKPOINT: &str = "checkpoint.cdn";
pub const SKIP_LOG: &str = "skipped.txt";
pub const FEATURE_EXT: &str = "fea";

/// Settings shared by every subcommand.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    /// `reference`, `toy`, or `custom` when read from a file.
    pub preset: String,
    pub model: CDNetConfig,
    pub out: PathBuf,
    pub exec: Exec,
}

impl RunConfig {
    /// Resolves the model config from a preset name or a config file (the
    /// file wins when both are given).
    pub fn new(preset: &str, config: Option<&Path>, seed: Option<u64>, out: PathBuf) -> Result<Self> {
        let (preset, model) = match config {
            Some(path) => {
                require_file(path, "config file")?;
                ("custom".to_string(), CDNetConfig::load(path)?)
            }
            None => (preset.to_string(), CDNetConfig::preset(preset)?),
        };
        Ok(RunConfig {
            seed: seed.unwrap_or(DEFAULT_SEED),
            preset,
            model,
            out,
            exec: Exec::default(),
        })
    }

    pub fn toy(out: PathBuf) -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            preset: "toy".into(),
            model: CDNetConfig::toy(),
            out,
            exec: Exec::default(),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn prepare_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    let probe = path.join(".write_probe");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

/// Renders `count` synthetic slides per class with a level-L side of
/// `slide_px`, tiles them and writes `images/*.ppm`, `manifest.tsv` and
/// `labels.tsv` under `rc.out`. Every tile is listed; the tissue filter is
/// applied by the consumers.
pub fn cmd_gen_data(rc: &RunConfig, count: usize, slide_px: Option<u32>) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Usage("count must be positive".into()));
    }
    let patch_px = rc.model.patch_px() as u32;
    let slide_px = slide_px.unwrap_or(4 * patch_px);
    if slide_px < patch_px {
        return Err(Error::Config(format!(
            "slide side {slide_px} is smaller than the {patch_px} px patch"
        )));
    }
    prepare_out_dir(&rc.out)?;
    let images = rc.out.join("images");
    fs::create_dir_all(&images)?;
    let slides = synthetic_slides(rc.seed, count, slide_px, rc.model.mag_ratio() as u32, rc.exec)?;
    let pairs = tile_slides(&slides, patch_px, false)?;
    let records: Vec<ManifestRecord> = pairs
        .iter()
        .map(|p| ManifestRecord {
            pair_id: p.pair_id.clone(),
            context_path: PathBuf::from("images").join(format!("{}_context.ppm", p.pair_id)),
            detail_path: PathBuf::from("images").join(format!("{}_detail.ppm", p.pair_id)),
            row: p.pair.origin.0,
            col: p.pair.origin.1,
            slide_id: p.slide_id.clone(),
            label: p.label,
        })
        .collect();
    let written = parallel::map(rc.exec, &pairs.iter().zip(&records).collect::<Vec<_>>(), |(p, r)| {
        write_ppm(&rc.out.join(&r.context_path), &p.pair.context)?;
        write_ppm(&rc.out.join(&r.detail_path), &p.pair.detail)
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let manifest = rc.out.join(MANIFEST);
    PyramidManifest { records }.write(&manifest)?;
    let labels: Vec<(String, u8)> = slides.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
    write_labels(&rc.out.join(LABELS), &labels)?;
    Ok(manifest)
}

pub fn write_labels(path: &Path, labels: &[(String, u8)]) -> Result<()> {
    let mut text = String::new();
    for (id, label) in labels {
        writeln!(text, "{id}\t{label}").expect("write to string");
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format {
            kind: "labels",
            detail: format!("{}: line {}: expected <slide_id>\\t<0|1>", path.display(), i + 1),
        };
        let (id, label) = line.split_once('\t').ok_or_else(bad)?;
        let label: u8 = label.trim().parse().map_err(|_| bad())?;
        if label > 1 {
            return Err(bad());
        }
        out.push((id.to_string(), label));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pretrain

/// Pretraining knobs exposed on the command line.
#[derive(Clone, Debug)]
pub struct PretrainArgs {
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub peak_lr: Option<f64>,
    pub arch: Arch,
    pub max_steps: Option<usize>,
}

impl Default for PretrainArgs {
    fn default() -> Self {
        PretrainArgs {
            epochs: PretrainOptions::default().epochs,
            batch_size: None,
            peak_lr: None,
            arch: Arch::CdNet,
            max_steps: None,
        }
    }
}

fn check_geometry(config: &CDNetConfig, pair: &LabeledPair) -> Result<()> {
    let side = config.patch_px() as u32;
    let detail = config.detail_px() as u32;
    if pair.pair.context.dimensions() != (side, side) || pair.pair.detail.dimensions() != (detail, detail) {
        return Err(Error::Config(format!(
            "pair {} is {:?}/{:?} px but the model expects {side}/{detail}",
            pair.pair_id,
            pair.pair.context.dimensions(),
            pair.pair.detail.dimensions()
        )));
    }
    Ok(())
}

fn load_manifest_pairs(manifest: &Path, exec: Exec) -> Result<Vec<LabeledPair>> {
    require_file(manifest, "manifest")?;
    let m = PyramidManifest::read(manifest)?;
    pyramid::load_pairs(&m, exec)
}

/// Runs self-distillation on the tissue pairs of `manifest`. Writes
/// `checkpoint.cdn` and `loss.tsv` under `rc.out`.
pub fn cmd_pretrain(rc: &RunConfig, manifest: &Path, args: &PretrainArgs) -> Result<PathBuf> {
    require_file(manifest, "manifest")?;
    prepare_out_dir(&rc.out)?;
    let pairs: Vec<LabeledPair> = load_manifest_pairs(manifest, rc.exec)?
        .into_iter()
        .filter(|p| tissue_filter(&p.pair, TISSUE_SATURATION))
        .collect();
    let Some(first) = pairs.first() else {
        return Err(Error::Usage("no pair in the manifest passes the tissue filter".into()));
    };
    check_geometry(&rc.model, first)?;
    let defaults = PretrainOptions::default();
    let opts = PretrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        peak_lr: args.peak_lr,
        max_steps: args.max_steps,
        out_dir: Some(rc.out.clone()),
        exec: rc.exec,
        ..defaults
    };
    ssl::pretrain(&pairs, rc.model, args.arch, &opts, rc.seed)?;
    Ok(rc.out.join(CHECKPOINT))
}

// ---------------------------------------------------------------------------
// extract

/// Backbone from the student branch of a checkpoint.
pub fn load_backbone(checkpoint: &Path) -> Result<(Model, ParamStore)> {
    require_file(checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(checkpoint)?;
    let arch = ck.meta.arch()?;
    let (model, mut store) = Model::init(ck.meta.model, arch, 0)?;
    ck.fill_store("student", &mut store)?;
    Ok((model, store))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extracted {
    pub dir: PathBuf,
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

/// Embeds every tissue pair with the checkpoint's student backbone and writes
/// one `<slide_id>.fea` per slide in manifest order, plus `labels.tsv` for
/// the written slides. Slides with no tissue pair are listed in
/// `skipped.txt`.
pub fn cmd_extract(rc: &RunConfig, manifest: &Path, checkpoint: &Path) -> Result<Extracted> {
    require_file(manifest, "manifest")?;
    require_file(checkpoint, "checkpoint")?;
    prepare_out_dir(&rc.out)?;
    let (model, store) = load_backbone(checkpoint)?;
    let pairs = load_manifest_pairs(manifest, rc.exec)?;
    if let Some(first) = pairs.first() {
        check_geometry(&model.config, first)?;
    }
    let mut slides: Vec<(String, u8, Vec<&LabeledPair>)> = Vec::new();
    for p in &pairs {
        match slides.iter_mut().find(|s| s.0 == p.slide_id) {
            Some(s) => s.2.push(p),
            None => slides.push((p.slide_id.clone(), p.label, vec![p])),
        }
    }
    slides.sort_by(|a, b| a.0.cmp(&b.0));
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    let mut labels = Vec::new();
    for (slide_id, label, members) in &slides {
        let kept: Vec<&cdnet::pyramid::PatchPair> = members
            .iter()
            .filter(|p| tissue_filter(&p.pair, TISSUE_SATURATION))
            .map(|p| &p.pair)
            .collect();
        if kept.is_empty() {
            skipped.push(slide_id.clone());
            continue;
        }
        let feats = ssl::embed_pairs(&model, &store, &kept, rc.exec)?;
        let d = model.config.dim1;
        let data: Vec<f64> = feats.iter().flat_map(|t| t.data().iter().copied()).collect();
        let t = cdnet::tensor::Tensor::new(&[kept.len(), d], data)?;
        mil::write_features(&rc.out.join(format!("{slide_id}.{FEATURE_EXT}")), &t)?;
        written.push(slide_id.clone());
        labels.push((slide_id.clone(), *label));
    }
    let mut log = fs::File::create(rc.out.join(SKIP_LOG))?;
    for s in &skipped {
        writeln!(log, "{s}\tno pair passes the tissue filter")?;
    }
    write_labels(&rc.out.join(LABELS), &labels)?;
    Ok(Extracted {
        dir: rc.out.clone(),
        written,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// mil

pub const TEST_FRACTION: f64 = 0.3;
pub const VAL_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct MilReport {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub best_epoch: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Reads the bags named in a labels file from `feature_dir`.
pub fn load_bags(feature_dir: &Path, labels: &Path) -> Result<Vec<Bag>> {
    require_dir(feature_dir, "feature directory")?;
    require_file(labels, "labels file")?;
    let mut seen = BTreeMap::new();
    for (id, label) in read_labels(labels)? {
        if seen.insert(id.clone(), label).is_some() {
            return Err(Error::Integrity(format!("slide {id} is labeled twice")));
        }
    }
    seen.into_iter()
        .map(|(id, label)| {
            let path = feature_dir.join(format!("{id}.{FEATURE_EXT}"));
            if !path.is_file() {
                return Err(Error::Integrity(format!("slide {id} has no feature file")));
            }
            Bag::new(mil::read_features(&path)?, label, id)
        })
        .collect()
}

/// Splits slides into train/val/test by stratified sampling (30% test, 15%
/// validation), trains the MIL head and evaluates the test split. Writes
/// `predictions.tsv` and `metrics.tsv` under `rc.out`.
pub fn cmd_mil(rc: &RunConfig, feature_dir: &Path, labels: &Path, hyper: &MilHyper) -> Result<MilReport> {
    let bags = load_bags(feature_dir, labels)?;
    prepare_out_dir(&rc.out)?;
    mil_on_bags(rc, &bags, hyper)
}

pub fn mil_on_bags(rc: &RunConfig, bags: &[Bag], hyper: &MilHyper) -> Result<MilReport> {
    let Some(first) = bags.first() else {
        return Err(Error::Usage("no bags to train on".into()));
    };
    let dim = first.dim();
    if let Some(b) = bags.iter().find(|b| b.dim() != dim) {
        return Err(Error::Integrity(format!(
            "slide {} has feature dimension {}, expected {dim}",
            b.slide_id,
            b.dim()
        )));
    }
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let (rest, test) = mil::stratified_split(&labels, TEST_FRACTION, rc.seed);
    let rest_labels: Vec<u8> = rest.iter().map(|&i| labels[i]).collect();
    let (train, val) =
        mil::stratified_split(&rest_labels, VAL_FRACTION / (1.0 - TEST_FRACTION), rc.seed ^ 1);
    let pick = |idx: &[usize], base: &[usize]| -> Vec<Bag> { idx.iter().map(|&i| bags[base[i]].clone()).collect() };
    let all: Vec<usize> = (0..bags.len()).collect();
    let train = pick(&train, &rest);
    let val = pick(&val, &rest);
    let test = pick(&test, &all);
    for (name, split) in [("validation", &val), ("test", &test)] {
        if let Some(label) = single_class_label(split) {
            return Err(Error::SingleClass { split: name, label });
        }
    }
    let init = MILParams::init(dim, mil::D_QUERY, mil::D_VALUE, rc.seed);
    let hyper = MilHyper {
        seed: rc.seed,
        exec: rc.exec,
        ..hyper.clone()
    };
    let trained = mil::train_mil(&train, &val, init, &hyper)?;
    let scores = mil::predict(&test, &trained.params, rc.exec)?;
    let test_labels: Vec<u8> = test.iter().map(|b| b.label).collect();
    let report = MilReport {
        accuracy: mil::accuracy(&scores, &test_labels),
        auc: mil::auc(&scores, &test_labels),
        best_epoch: trained.best_epoch,
        train: train.len(),
        val: val.len(),
        test: test.len(),
    };
    if rc.out.as_os_str().is_empty() {
        return Ok(report);
    }
    mil::write_predictions(&rc.out.join("predictions.tsv"), &test, &scores)?;
    let mut m = String::new();
    writeln!(m, "accuracy\t{}", report.accuracy).expect("write to string");
    writeln!(m, "auc\t{}", report.auc.map_or("NA".into(), |a| a.to_string())).expect("write to string");
    writeln!(m, "best_epoch\t{}", report.best_epoch).expect("write to string");
    writeln!(m, "split\t{}/{}/{}", report.train, report.val, report.test).expect("write to string");
    fs::write(rc.out.join("metrics.tsv"), m)?;
    Ok(report)
}

fn single_class_label(bags: &[Bag]) -> Option<u8> {
    let first = bags.first()?.label;
    bags.iter().all(|b| b.label == first).then_some(first)
}

// ---------------------------------------------------------------------------
// attention

/// Nearest-neighbour upsampling of a `[side, side]` map in `[0, 1]` to an
/// 8-bit `px×px` image.
pub fn map_to_image(map: &cdnet::tensor::Tensor, px: u32) -> Result<GrayImage> {
    let [rows, cols] = *map.shape() else {
        return Err(Error::Usage(format!("attention map must be 2-D, got {:?}", map.shape())));
    };
    if rows == 0 || cols == 0 || px as usize % rows != 0 || px as usize % cols != 0 {
        return Err(Error::Config(format!("{px} px is not a multiple of the {rows}x{cols} map")));
    }
    let (sy, sx) = (px as usize / rows, px as usize / cols);
    Ok(GrayImage::from_fn(px, px, |x, y| {
        let v = map.data()[(y as usize / sy) * cols + x as usize / sx];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

/// Writes the CLS attention of block `layer` for `pair_id` as a PGM the size
/// of the context patch.
pub fn cmd_attention(
    manifest: &Path,
    pair_id: &str,
    checkpoint: &Path,
    layer: usize,
    out_path: &Path,
) -> Result<PathBuf> {
    require_file(manifest, "manifest")?;
    require_file(checkpoint, "checkpoint")?;
    let m = PyramidManifest::read(manifest)?;
    let record = m
        .find(pair_id)
        .ok_or_else(|| Error::Lookup(format!("pair {pair_id} in {}", manifest.display())))?;
    let pair = pyramid::load_pair(record)?;
    let (model, store) = load_backbone(checkpoint)?;
    check_geometry(&model.config, &pair)?;
    attention_image(&model, &store, &pair.pair, layer, out_path)
}

pub fn attention_image(
    model: &Model,
    store: &ParamStore,
    pair: &cdnet::pyramid::PatchPair,
    layer: usize,
    out_path: &Path,
) -> Result<PathBuf> {
    let out = model.forward(store, pair)?;
    let map = attention_map(&out.context_attn, layer)?;
    let img = map_to_image(&map, model.config.patch_px() as u32)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    pyramid::write_pgm(out_path, &img)?;
    Ok(out_path.to_path_buf())
}

// ---------------------------------------------------------------------------
// complexity

/// Cost tables for each preset, separated by blank lines.
pub fn cmd_complexity(presets: &[String]) -> Result<String> {
    let mut out = String::new();
    for (i, name) in presets.iter().enumerate() {
        let config = CDNetConfig::preset(name)?;
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "preset {name}").expect("write to string");
        out.push_str(&complexity::render_table(&complexity::comparison(&config)?)?);
    }
    Ok(out)
}
