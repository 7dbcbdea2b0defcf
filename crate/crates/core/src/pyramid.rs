//! Two-level image pyramids, aligned tiling and the synthetic slide generator.
//!
//! Level `L` is the low-magnification image and level `H` the high one, with
//! `H = mag_ratio × L` on both axes. A [`PatchPair`] holds a `patch_px`
//! square tile of `L` and the exactly co-located `mag_ratio · patch_px` tile
//! of `H`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, ImageReader, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::parallel::{self, Exec};

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Saturation above which a pixel counts as tissue. Calibrated on generator
/// output: background pixels stay below 0.05, stroma sits near 0.25.
pub const TISSUE_SATURATION: f64 = 0.12;

/// Minimum tissue fraction for a pair to be kept.
pub const TISSUE_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pub level_l: RgbImage,
    pub level_h: RgbImage,
    pub mag_ratio: u32,
}

impl ImagePyramid {
    pub fn new(level_l: RgbImage, level_h: RgbImage, mag_ratio: u32) -> Result<Self> {
        check_levels(&level_l, &level_h, mag_ratio)?;
        Ok(ImagePyramid {
            level_l,
            level_h,
            mag_ratio,
        })
    }

    /// Builds level `L` as the box-filtered downsample of `level_h`.
    pub fn from_high(level_h: RgbImage, mag_ratio: u32) -> Result<Self> {
        if level_h.width() % mag_ratio != 0 || level_h.height() % mag_ratio != 0 {
            return Err(Error::Integrity(format!(
                "{}x{} high level not divisible by ratio {mag_ratio}",
                level_h.width(),
                level_h.height()
            )));
        }
        let level_l = box_downsample(&level_h, mag_ratio);
        Self::new(level_l, level_h, mag_ratio)
    }
}

fn check_levels(l: &RgbImage, h: &RgbImage, ratio: u32) -> Result<()> {
    if ratio < 2 {
        return Err(Error::Integrity(format!("magnification ratio {ratio} < 2")));
    }
    if h.width() != ratio * l.width() || h.height() != ratio * l.height() {
        return Err(Error::Integrity(format!(
            "levels {}x{} and {}x{} disagree with ratio {ratio}",
            l.width(),
            l.height(),
            h.width(),
            h.height()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub context: RgbImage,
    pub detail: RgbImage,
    /// `(row, col)` of the context tile in level-`L` pixels.
    pub origin: (u32, u32),
}

impl PatchPair {
    pub fn new(context: RgbImage, detail: RgbImage, origin: (u32, u32)) -> Result<Self> {
        let ratio = detail.width() / context.width().max(1);
        check_levels(&context, &detail, ratio)?;
        Ok(PatchPair {
            context,
            detail,
            origin,
        })
    }

    pub fn mag_ratio(&self) -> u32 {
        self.detail.width() / self.context.width()
    }

    pub fn patch_px(&self) -> u32 {
        self.context.width()
    }

    /// Whether box-downsampling the detail tile reproduces the context tile.
    pub fn is_aligned(&self) -> bool {
        box_downsample(&self.detail, self.mag_ratio()) == self.context
    }
}

/// Mean over each `k×k` block, rounded half up.
pub fn box_downsample(img: &RgbImage, k: u32) -> RgbImage {
    let (w, h) = (img.width() / k, img.height() / k);
    let area = k * k;
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        for dy in 0..k {
            for dx in 0..k {
                let p = img.get_pixel(x * k + dx, y * k + dy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
        }
        Rgb(acc.map(|s| ((s + area / 2) / area) as u8))
    })
}

/// Pads on the right and bottom with white up to multiples of `m`.
pub fn pad_to_multiple(img: &RgbImage, m: u32) -> RgbImage {
    let w = img.width().div_ceil(m) * m;
    let h = img.height().div_ceil(m) * m;
    if w == img.width() && h == img.height() {
        return img.clone();
    }
    RgbImage::from_fn(w, h, |x, y| {
        if x < img.width() && y < img.height() {
            *img.get_pixel(x, y)
        } else {
            WHITE
        }
    })
}

pub fn crop(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

/// Non-overlapping grid tiling in row-major order. Level `L` is padded with
/// white to a multiple of `patch_px` (and `H` correspondingly).
pub fn tile(pyramid: &ImagePyramid, patch_px: u32) -> Result<Vec<PatchPair>> {
    let r = pyramid.mag_ratio;
    check_levels(&pyramid.level_l, &pyramid.level_h, r)?;
    if patch_px == 0 {
        return Err(Error::Config("patch_px must be positive".into()));
    }
    let l = pad_to_multiple(&pyramid.level_l, patch_px);
    let h = pad_to_multiple(&pyramid.level_h, patch_px * r);
    let (rows, cols) = (l.height() / patch_px, l.width() / patch_px);
    let q = patch_px * r;
    let mut out = Vec::with_capacity((rows * cols) as usize);
    for i in 0..rows {
        for j in 0..cols {
            out.push(PatchPair {
                context: crop(&l, j * patch_px, i * patch_px, patch_px, patch_px),
                detail: crop(&h, j * q, i * q, q, q),
                origin: (i * patch_px, j * patch_px),
            });
        }
    }
    Ok(out)
}

fn saturation(p: &Rgb<u8>) -> f64 {
    let max = p.0.iter().copied().max().unwrap_or(0) as f64;
    let min = p.0.iter().copied().min().unwrap_or(0) as f64;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Fraction of context pixels whose saturation exceeds `threshold`.
pub fn tissue_fraction(pair: &PatchPair, threshold: f64) -> f64 {
    let n = pair.context.pixels().len() as f64;
    let tissue = pair.context.pixels().filter(|p| saturation(p) > threshold).count();
    tissue as f64 / n
}

/// Keeps pairs with at least 10% tissue pixels.
pub fn tissue_filter(pair: &PatchPair, threshold: f64) -> bool {
    tissue_fraction(pair, threshold) >= TISSUE_FRACTION
}

/// Knobs of the synthetic slide renderer. All lengths are level-`H` pixels.
#[derive(Clone, Debug)]
pub struct SynthParams {
    /// Expected cells per `(256 px)²` of tissue.
    pub cells_per_tile: f64,
    pub cell_radius: (f64, f64),
    /// Minor/major axis ratio range.
    pub aspect: (f64, f64),
    pub cluster_size: f64,
    pub cluster_sigma: f64,
    /// Half the intensity swing of the class-1 nuclear stripes.
    pub stripe_amplitude: i32,
    pub pixel_noise: i32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            cells_per_tile: 34.0,
            cell_radius: (6.5, 9.5),
            aspect: (0.7, 1.0),
            cluster_size: 6.0,
            cluster_sigma: 20.0,
            stripe_amplitude: 40,
            pixel_noise: 6,
        }
    }
}

struct Cell {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

/// Renders a labeled synthetic slide of `size_l × size_l` level-`L` pixels.
///
/// Class 0 scatters round, evenly filled nuclei uniformly over the tissue.
/// Class 1 groups nuclei into tight clusters (visible at `L`) and gives each
/// nucleus a two-pixel horizontal stripe texture whose `mag_ratio`-block
/// average equals the class-0 fill (visible only at `H`). Cell count, size
/// and shape distributions are shared, so mean intensity carries no class
/// signal.
pub fn gen_synthetic(seed: u64, class: u8, size_l: u32, mag_ratio: u32) -> Result<ImagePyramid> {
    gen_synthetic_with(seed, class, size_l, mag_ratio, &SynthParams::default())
}

pub fn gen_synthetic_with(
    seed: u64,
    class: u8,
    size_l: u32,
    mag_ratio: u32,
    sp: &SynthParams,
) -> Result<ImagePyramid> {
    if class > 1 {
        return Err(Error::Config(format!("class {class} not in {{0, 1}}")));
    }
    if mag_ratio < 2 || mag_ratio % 2 != 0 {
        return Err(Error::Config(format!(
            "synthetic slides need an even magnification ratio, got {mag_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (size_l * mag_ratio) as f64;
    let jitter = |rng: &mut ChaCha8Rng, c: [i32; 3], j: i32| -> [i32; 3] {
        c.map(|v| v + rng.random_range(-j..=j))
    };
    let background = jitter(&mut rng, [246, 244, 247], 3);
    let stroma = jitter(&mut rng, [226, 168, 204], 10);
    let nucleus = jitter(&mut rng, [100, 58, 138], 12);

    // Tissue is an ellipse that may leave some corners bare.
    let tcx = side * rng.random_range(0.4..0.6);
    let tcy = side * rng.random_range(0.4..0.6);
    let trx = side * rng.random_range(0.5..0.75);
    let try_ = side * rng.random_range(0.5..0.75);
    let in_tissue = |x: f64, y: f64| {
        let dx = (x - tcx) / trx;
        let dy = (y - tcy) / try_;
        dx * dx + dy * dy <= 1.0
    };

    let tissue_area = {
        let step = 8.0;
        let mut n = 0usize;
        let mut y = step / 2.0;
        while y < side {
            let mut x = step / 2.0;
            while x < side {
                if in_tissue(x, y) {
                    n += 1;
                }
                x += step;
            }
            y += step;
        }
        n as f64 * step * step
    };
    let expected = sp.cells_per_tile * tissue_area / (256.0 * 256.0);
    let count = expected.round() as usize;

    let cells = place_cells(&mut rng, class, count, side, sp, &in_tissue);

    let noise = sp.pixel_noise;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a015e);
    let n = (size_l * mag_ratio) as usize;
    let mut buf = vec![0i32; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let base = if in_tissue(fx, fy) { stroma } else { background };
            let o = (y * n + x) * 3;
            buf[o..o + 3].copy_from_slice(&base);
        }
    }
    for c in &cells {
        let r = c.a.ceil() as i64 + 1;
        let (ct, st) = (c.theta.cos(), c.theta.sin());
        let (x0, x1) = ((c.cx as i64 - r).max(0), (c.cx as i64 + r).min(n as i64 - 1));
        let (y0, y1) = ((c.cy as i64 - r).max(0), (c.cy as i64 + r).min(n as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - c.cx;
                let dy = y as f64 + 0.5 - c.cy;
                let u = (dx * ct + dy * st) / c.a;
                let v = (-dx * st + dy * ct) / c.b;
                if u * u + v * v > 1.0 {
                    continue;
                }
                let shift = if class == 1 {
                    if y % 2 == 0 {
                        -sp.stripe_amplitude
                    } else {
                        sp.stripe_amplitude
                    }
                } else {
                    0
                };
                let o = (y as usize * n + x as usize) * 3;
                for ch in 0..3 {
                    buf[o + ch] = nucleus[ch] + shift;
                }
            }
        }
    }
    let mut level_h = RgbImage::new(n as u32, n as u32);
    for (i, px) in level_h.pixels_mut().enumerate() {
        for ch in 0..3 {
            let v = buf[i * 3 + ch] + noise_rng.random_range(-noise..=noise);
            px[ch] = v.clamp(0, 255) as u8;
        }
    }
    ImagePyramid::from_high(level_h, mag_ratio)
}

fn place_cells(
    rng: &mut ChaCha8Rng,
    class: u8,
    count: usize,
    side: f64,
    sp: &SynthParams,
    in_tissue: &dyn Fn(f64, f64) -> bool,
) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::with_capacity(count);
    let n_clusters = ((count as f64 / sp.cluster_size).ceil() as usize).max(1);
    let mut centers = Vec::with_capacity(n_clusters);
    while centers.len() < n_clusters {
        let (x, y) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        if in_tissue(x, y) {
            centers.push((x, y));
        }
    }
    let offset = Normal::new(0.0, sp.cluster_sigma).expect("positive sigma");
    for i in 0..count {
        let a = rng.random_range(sp.cell_radius.0..sp.cell_radius.1);
        let b = a * rng.random_range(sp.aspect.0..sp.aspect.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let mut placed = None;
        for attempt in 0..200 {
            let (x, y) = if class == 1 && attempt < 120 {
                let (cx, cy) = centers[i % n_clusters];
                (cx + offset.sample(rng), cy + offset.sample(rng))
            } else {
                (rng.random_range(0.0..side), rng.random_range(0.0..side))
            };
            if !in_tissue(x, y) || x < a || y < a || x > side - a || y > side - a {
                continue;
            }
            let free = cells.iter().all(|c| {
                let d2 = (c.cx - x).powi(2) + (c.cy - y).powi(2);
                d2 > (c.a + a + 2.0).powi(2)
            });
            if free {
                placed = Some((x, y));
                break;
            }
        }
        if let Some((cx, cy)) = placed {
            cells.push(Cell { cx, cy, a, b, theta });
        }
    }
    cells
}

/// A tiled pair with its provenance.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub pair_id: String,
    pub slide_id: String,
    pub label: u8,
    pub pair: PatchPair,
}

/// A synthetic slide before tiling.
#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub label: u8,
    pub pyramid: ImagePyramid,
}

/// `count_per_class` slides of each class, interleaved 0,1,0,1,... Slide `i`
/// is rendered from an independent stream of `seed`.
pub fn synthetic_slides(
    seed: u64,
    count_per_class: usize,
    size_l: u32,
    mag_ratio: u32,
    exec: Exec,
) -> Result<Vec<SyntheticSlide>> {
    let results = parallel::map_range(exec, 2 * count_per_class, |i| {
        let label = (i % 2) as u8;
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        seeder.set_stream(i as u64);
        let slide_seed: u64 = seeder.random();
        gen_synthetic(slide_seed, label, size_l, mag_ratio).map(|pyramid| SyntheticSlide {
            slide_id: format!("slide_{i:04}"),
            label,
            pyramid,
        })
    });
    results.into_iter().collect()
}

/// Tiles slides into labeled pairs, keeping only pairs that pass the tissue
/// filter when `filter` is set.
pub fn tile_slides(slides: &[SyntheticSlide], patch_px: u32, filter: bool) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for s in slides {
        for (k, pair) in tile(&s.pyramid, patch_px)?.into_iter().enumerate() {
            if filter && !tissue_filter(&pair, TISSUE_SATURATION) {
                continue;
            }
            out.push(LabeledPair {
                pair_id: format!("{}_{k:03}", s.slide_id),
                slide_id: s.slide_id.clone(),
                label: s.label,
                pair,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Files

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut reader = ImageReader::open(path)?;
    reader.set_format(ImageFormat::Pnm);
    Ok(reader.decode()?.to_rgb8())
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub context_path: PathBuf,
    pub detail_path: PathBuf,
    pub row: u32,
    pub col: u32,
    pub slide_id: String,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PyramidManifest {
    pub records: Vec<ManifestRecord>,
}

impl PyramidManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.pair_id,
                r.context_path.display(),
                r.detail_path.display(),
                r.row,
                r.col,
                r.slide_id,
                r.label
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a manifest. Relative image paths resolve against the
    /// manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let reader = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::format("manifest", format!("line {}: {what}", lineno + 1));
            if f.len() != 7 {
                return Err(bad(&format!("expected 7 fields, found {}", f.len())));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            records.push(ManifestRecord {
                pair_id: f[0].to_string(),
                context_path: resolve(f[1]),
                detail_path: resolve(f[2]),
                row: f[3].parse().map_err(|_| bad("row"))?,
                col: f[4].parse().map_err(|_| bad("col"))?,
                slide_id: f[5].to_string(),
                label: f[6].parse().map_err(|_| bad("label"))?,
            });
        }
        Ok(PyramidManifest { records })
    }

    pub fn find(&self, pair_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.pair_id == pair_id)
    }
}

/// Loads and validates one manifest entry.
pub fn load_pair(record: &ManifestRecord) -> Result<LabeledPair> {
    let context = read_ppm(&record.context_path)?;
    let detail = read_ppm(&record.detail_path)?;
    let pair = PatchPair::new(context, detail, (record.row, record.col)).map_err(|e| {
        Error::Integrity(format!("pair {}: {e}", record.pair_id))
    })?;
    Ok(LabeledPair {
        pair_id: record.pair_id.clone(),
        slide_id: record.slide_id.clone(),
        label: record.label,
        pair,
    })
}

pub fn load_pairs(manifest: &PyramidManifest, exec: Exec) -> Result<Vec<LabeledPair>> {
    parallel::map(exec, &manifest.records, load_pair).into_iter().collect()
}
