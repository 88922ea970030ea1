//! Procedural chest-radiograph phantoms.
//!
//! Every image is a smooth anatomical background (body silhouette, two darker
//! lung fields, low-frequency cosine noise) plus one additive motif per active
//! finding. Background and motifs draw from independent sub-seeds, so two
//! label vectors rendered with the same seed share the same background.
//!
//! Motif table (coordinates are fractions of the image side, `s` is the
//! style's motif scale, intensities are multiplied by the style's gain):
//!
//! | finding                    | motif                                               | intensity |
//! |----------------------------|-----------------------------------------------------|-----------|
//! | No Finding                 | none                                                |           |
//! | Enlarged Cardiomediastinum | vertical mediastinal band, half-width 0.09·s        | +0.35     |
//! | Cardiomegaly               | central lower ellipse, radii (0.17, 0.13)·s         | +0.35     |
//! | Lung Opacity               | mid-frequency texture under a Gaussian envelope     | +0.38     |
//! | Lung Lesion                | small disk (nodule), radius 0.04·s                  | +0.45     |
//! | Edema                      | bilateral perihilar Gaussian haze                   | +0.30     |
//! | Consolidation              | dense rounded patch in a lower lung                 | +0.40     |
//! | Pneumonia                  | cluster of five small blobs                         | +0.30     |
//! | Atelectasis                | two thin horizontal plates in a lower lung          | +0.40     |
//! | Pneumothorax               | dark apical crescent with a bright pleural edge     | -0.15/+0.35 |
//! | Pleural Effusion           | thin bright meniscus line near the lower boundary   | +0.45     |
//! | Pleural Other              | lateral chest-wall strip                            | +0.35     |
//! | Fracture                   | interrupted diagonal rib segment                    | +0.45     |
//! | Support Devices            | bright vertical tube plus a small box               | +0.55     |
//!
//! The background never exceeds [`MOTIF_THRESHOLD`]; every motif except the
//! pneumothorax darkening pushes pixels above it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::findings::{FindingLabel, LabelVector, BENCH_CLASSES, FINDINGS};
use crate::imageio;
use crate::seed;

pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];

/// Pixel value no background pixel reaches.
pub const MOTIF_THRESHOLD: f64 = 0.6;
pub const CARDIOMEGALY_GAIN: f64 = 0.35;
/// Nominal Cardiomegaly ellipse: center and radii at motif scale 1.
pub const CARDIO_CENTER: (f64, f64) = (0.52, 0.66);
pub const CARDIO_RADII: (f64, f64) = (0.17, 0.13);
/// Maximum center jitter and radius growth of the Cardiomegaly ellipse.
pub const CARDIO_JITTER: f64 = 0.02;
pub const CARDIO_GROWTH: f64 = 0.15;

const BG_BASE: f64 = 0.30;
const BG_BODY: f64 = 0.08;
const BG_LUNG: f64 = -0.12;
const BG_SPINE: f64 = 0.05;
const BG_NOISE_AMP: f64 = 0.03;
const BG_NOISE_TERMS: usize = 4;

/// Acquisition style. The default is the training domain; [`PhantomStyle::shifted`]
/// emulates a different scanner/site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomStyle {
    pub motif_gain: f64,
    pub motif_scale: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for PhantomStyle {
    fn default() -> Self {
        Self { motif_gain: 1.0, motif_scale: 1.0, brightness: 0.0, contrast: 1.0 }
    }
}

impl PhantomStyle {
    pub fn shifted() -> Self {
        Self { motif_gain: 0.7, motif_scale: 1.25, brightness: 0.06, contrast: 0.85 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub size: usize,
    /// Row-major `size x size`, values in [0, 1].
    pub pixels: Vec<f64>,
    pub labels: LabelVector,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, size: usize, pixels: Vec<f64>, labels: LabelVector) -> Result<Self> {
        if !size.is_power_of_two() || size == 0 {
            return Err(invalid(format!("image side {size} is not a power of two")));
        }
        if pixels.len() != size * size {
            return Err(Error::Shape(format!("{} pixels for a {size}x{size} image", pixels.len())));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { id: id.into(), size, pixels, labels })
    }
}

fn smoothstep_inside(signed_dist: f64, soft: f64) -> f64 {
    (0.5 - signed_dist / soft).clamp(0.0, 1.0)
}

fn ellipse_dist(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    (r - 1.0) * rx.min(ry)
}

fn segment_dist(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

struct Canvas {
    n: usize,
    soft: f64,
    v: Vec<f64>,
}

impl Canvas {
    fn new(n: usize) -> Self {
        // edges soften over at least one pixel
        Self { n, soft: (1.5 / n as f64).max(0.012), v: vec![0.0; n * n] }
    }

    fn each(&mut self, mut f: impl FnMut(f64, f64) -> f64) {
        let n = self.n;
        for i in 0..n {
            let y = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                self.v[i * n + j] += f(x, y);
            }
        }
    }
}

fn lung_centers() -> [(f64, f64); 2] {
    [(0.32, 0.48), (0.68, 0.48)]
}
const LUNG_RADII: (f64, f64) = (0.14, 0.27);

fn background(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng_for(seed, "phantom/background");
    let terms: Vec<(f64, f64, f64)> = (0..BG_NOISE_TERMS)
        .map(|_| {
            let fx = rng.random_range(0.5..2.0);
            let fy = rng.random_range(0.5..2.0);
            let ph = rng.random_range(0.0..2.0 * PI);
            (fx, fy, ph)
        })
        .collect();
    let mut c = Canvas::new(n);
    let soft = 0.04;
    c.each(|x, y| {
        let body = BG_BODY * smoothstep_inside(ellipse_dist(x, y, 0.5, 0.55, 0.42, 0.45), soft);
        let lungs: f64 = lung_centers()
            .iter()
            .map(|(cx, cy)| BG_LUNG * smoothstep_inside(ellipse_dist(x, y, *cx, *cy, LUNG_RADII.0, LUNG_RADII.1), soft))
            .sum();
        let spine = BG_SPINE * smoothstep_inside((x - 0.5).abs() - 0.03, soft);
        let noise: f64 = terms
            .iter()
            .map(|(fx, fy, ph)| BG_NOISE_AMP * (2.0 * PI * (fx * x + fy * y) + ph).cos())
            .sum();
        BG_BASE + body + lungs + spine + noise
    });
    c.v
}

/// Additive motif field for one finding, at unit gain.
fn motif(label: FindingLabel, n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive_index(seed, "phantom/motif", label.index() as u64));
    let mut c = Canvas::new(n);
    let soft = c.soft;
    let side: usize = rng.random_range(0..2);
    let lung = lung_centers()[side];
    let jit = |rng: &mut rand_chacha::ChaCha8Rng, a: f64| rng.random_range(-a..a);
    match label.index() {
        0 => {}
        1 => {
            let hw = 0.09 * scale * (1.0 + rng.random_range(0.0..0.2));
            let (y0, y1) = (0.15, 0.55);
            c.each(|x, y| {
                let d = ((x - 0.5).abs() - hw).max((y - (y0 + y1) / 2.0).abs() - (y1 - y0) / 2.0);
                0.35 * smoothstep_inside(d, soft)
            });
        }
        2 => {
            let cx = CARDIO_CENTER.0 + jit(&mut rng, CARDIO_JITTER);
            let cy = CARDIO_CENTER.1 + jit(&mut rng, CARDIO_JITTER);
            let g = 1.0 + rng.random_range(0.0..CARDIO_GROWTH);
            let (rx, ry) = (CARDIO_RADII.0 * scale * g, CARDIO_RADII.1 * scale * g);
            c.each(|x, y| CARDIOMEGALY_GAIN * smoothstep_inside(ellipse_dist(x, y, cx, cy, rx, ry), soft));
        }
        3 => {
            let (cx, cy) = (lung.0 + jit(&mut rng, 0.03), lung.1 + jit(&mut rng, 0.06));
            let sigma = 0.12 * scale;
            let waves: Vec<(f64, f64, f64)> = (0..5)
                .map(|_| (rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(0.0..2.0 * PI)))
                .collect();
            c.each(|x, y| {
                let env = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
                let tex: f64 = waves.iter().map(|(a, b, p)| (a * x + b * y + p).cos()).sum::<f64>() / 5.0;
                0.38 * env * (0.6 + 0.4 * tex).max(0.0)
            });
        }
        4 => {
            let (cx, cy) = (lung.0 + jit(&mut rng, 0.06), lung.1 + jit(&mut rng, 0.15));
            let r = 0.04 * scale;
            c.each(|x, y| 0.45 * smoothstep_inside(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r, soft));
        }
        5 => {
            let sigma = 0.08 * scale * (1.0 + rng.random_range(0.0..0.2));
            let cy = 0.5 + jit(&mut rng, 0.03);
            c.each(|x, y| {
                let g = |cx: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
                0.30 * (g(0.37) + g(0.63)).min(1.0)
            });
        }
        6 => {
            let (cx, cy) = (lung.0 + jit(&mut rng, 0.03), 0.62 + jit(&mut rng, 0.04));
            let h = 0.08 * scale;
            c.each(|x, y| {
                let d = ((x - cx).abs() - h).max((y - cy).abs() - h) + 0.02;
                0.40 * smoothstep_inside(d, soft.max(0.03))
            });
        }
        7 => {
            let (cx, cy) = (lung.0 + jit(&mut rng, 0.04), lung.1 + jit(&mut rng, 0.10));
            let blobs: Vec<(f64, f64)> =
                (0..5).map(|_| (cx + jit(&mut rng, 0.07) * scale, cy + jit(&mut rng, 0.07) * scale)).collect();
            let sigma = 0.025 * scale;
            c.each(|x, y| {
                let s: f64 = blobs
                    .iter()
                    .map(|(bx, by)| (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .sum();
                0.30 * s.min(1.5)
            });
        }
        8 => {
            let cx = lung.0 + jit(&mut rng, 0.03);
            let y0 = 0.60 + jit(&mut rng, 0.04);
            let half = 0.075 * scale;
            let th = 0.012 * scale;
            c.each(|x, y| {
                let d1 = segment_dist(x, y, (cx - half, y0), (cx + half, y0)) - th;
                let d2 = segment_dist(x, y, (cx - half, y0 + 0.06), (cx + half, y0 + 0.06)) - th;
                0.40 * smoothstep_inside(d1.min(d2), soft)
            });
        }
        9 => {
            let outer = if side == 0 { lung.0 - LUNG_RADII.0 } else { lung.0 + LUNG_RADII.0 };
            let cy = 0.30 + jit(&mut rng, 0.03);
            let (rx, ry) = (0.08 * scale, 0.14 * scale);
            c.each(|x, y| {
                let d = ellipse_dist(x, y, outer, cy, rx, ry);
                let dark = -0.15 * smoothstep_inside(d, soft);
                let edge = 0.35 * smoothstep_inside(d.abs() - 0.01, soft);
                let in_lung = smoothstep_inside(
                    ellipse_dist(x, y, lung.0, lung.1, LUNG_RADII.0 + 0.02, LUNG_RADII.1 + 0.02),
                    soft,
                );
                (dark + edge) * in_lung
            });
        }
        10 => {
            let y0 = 0.80 + jit(&mut rng, 0.02);
            let curve = 0.05 * scale;
            let th = 0.015 * scale;
            c.each(|x, y| {
                let dx = (x - lung.0) / LUNG_RADII.0;
                if dx.abs() > 1.1 {
                    return 0.0;
                }
                let line_y = y0 - curve * (1.0 - dx * dx);
                let line = 0.45 * smoothstep_inside((y - line_y).abs() - th, soft);
                let fill = 0.15 * smoothstep_inside(line_y - y, soft) * smoothstep_inside(y - 0.9, soft);
                line + fill
            });
        }
        11 => {
            let x0 = if side == 0 { 0.11 } else { 0.89 };
            let hw = 0.015 * scale;
            c.each(|x, y| {
                let d = ((x - x0).abs() - hw).max((y - 0.5).abs() - 0.2 * scale);
                0.35 * smoothstep_inside(d, soft)
            });
        }
        12 => {
            let x0 = if side == 0 { 0.16 } else { 0.84 };
            let y0 = 0.28 + jit(&mut rng, 0.05);
            let dir = if side == 0 { 1.0 } else { -1.0 };
            let len = 0.06 * scale;
            let th = 0.012 * scale;
            let a = (x0, y0);
            let m1 = (x0 + dir * len, y0 + 0.5 * len);
            let m2 = (x0 + dir * (len + 0.025), y0 + 0.5 * (len + 0.025));
            let b = (x0 + dir * (2.0 * len + 0.025), y0 + 0.5 * (2.0 * len + 0.025));
            c.each(|x, y| {
                let d = (segment_dist(x, y, a, m1) - th).min(segment_dist(x, y, m2, b) - th);
                0.45 * smoothstep_inside(d, soft)
            });
        }
        13 => {
            let x0 = 0.46 + jit(&mut rng, 0.02);
            let th = 0.008 * scale;
            let (bx, by) = (0.76 + jit(&mut rng, 0.03), 0.18 + jit(&mut rng, 0.03));
            let hb = 0.03 * scale;
            c.each(|x, y| {
                let tube = segment_dist(x, y, (x0, 0.0), (x0 + 0.02, 0.5)) - th;
                let bxd = ((x - bx).abs() - hb).max((y - by).abs() - 0.7 * hb);
                0.55 * smoothstep_inside(tube.min(bxd), soft)
            });
        }
        _ => unreachable!("finding index out of range"),
    }
    c.v
}

fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::UnsupportedSize(size))
    }
}

/// Render the phantom for `labels` at `size` in the default style.
pub fn generate_phantom(labels: &LabelVector, size: usize, seed: u64) -> Result<LabeledImage> {
    generate_phantom_styled(labels, size, seed, &PhantomStyle::default())
}

pub fn generate_phantom_styled(
    labels: &LabelVector,
    size: usize,
    seed: u64,
    style: &PhantomStyle,
) -> Result<LabeledImage> {
    check_size(size)?;
    let mut v = background(size, seed);
    for label in labels.labels() {
        let m = motif(label, size, style.motif_scale, seed);
        for (a, b) in v.iter_mut().zip(&m) {
            *a += style.motif_gain * b;
        }
    }
    for p in &mut v {
        *p = (0.5 + style.contrast * (*p - 0.5) + style.brightness).clamp(0.0, 1.0);
    }
    LabeledImage::new(format!("phantom-{seed:016x}-{:04x}", labels.mask()), size, v, *labels)
}

/// Dataset recipe. `multi_label_fraction` adds that fraction of
/// `n_per_class * classes.len()` two-finding images on top of the
/// single-finding ones; No Finding never appears in combinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_per_class: usize,
    pub size: usize,
    pub classes: Vec<FindingLabel>,
    pub multi_label_fraction: f64,
    pub style: PhantomStyle,
}

impl DatasetSpec {
    pub fn new(n_per_class: usize, size: usize) -> Self {
        Self {
            n_per_class,
            size,
            classes: BENCH_CLASSES.to_vec(),
            multi_label_fraction: 0.2,
            style: PhantomStyle::default(),
        }
    }

    /// Label vectors in generation order; independent of the seed.
    pub fn label_plan(&self) -> Result<Vec<LabelVector>> {
        if self.classes.is_empty() {
            return Err(invalid("class set is empty"));
        }
        if self.n_per_class == 0 {
            return Err(invalid("n_per_class must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.multi_label_fraction) {
            return Err(invalid("multi_label_fraction must lie in [0, 1]"));
        }
        let mut classes = self.classes.clone();
        classes.sort();
        classes.dedup();
        let mut plan = Vec::new();
        for c in &classes {
            plan.extend(std::iter::repeat_n(LabelVector::single(*c), self.n_per_class));
        }
        let disease: Vec<FindingLabel> = classes.iter().copied().filter(|c| *c != FindingLabel::NO_FINDING).collect();
        let pairs: Vec<(FindingLabel, FindingLabel)> = disease
            .iter()
            .enumerate()
            .flat_map(|(i, a)| disease[i + 1..].iter().map(move |b| (*a, *b)))
            .collect();
        let n_multi = (self.multi_label_fraction * (self.n_per_class * classes.len()) as f64).round() as usize;
        if !pairs.is_empty() {
            for k in 0..n_multi {
                let (a, b) = pairs[k % pairs.len()];
                plan.push(LabelVector::from_labels(&[a, b])?);
            }
        }
        Ok(plan)
    }
}

/// Six-class default recipe with `n_per_class` images per class.
pub fn make_dataset(n_per_class: usize, size: usize, classes: &[FindingLabel], seed: u64) -> Result<Vec<LabeledImage>> {
    let spec = DatasetSpec { classes: classes.to_vec(), ..DatasetSpec::new(n_per_class, size) };
    make_dataset_with(&spec, seed)
}

pub fn make_dataset_with(spec: &DatasetSpec, seed: u64) -> Result<Vec<LabeledImage>> {
    check_size(spec.size)?;
    let plan = spec.label_plan()?;
    plan.iter()
        .enumerate()
        .map(|(i, labels)| {
            let s = seed::derive_index(seed, "phantom/dataset", i as u64);
            let mut img = generate_phantom_styled(labels, spec.size, s, &spec.style)?;
            img.id = format!("ph{:08x}-{i:05}", seed as u32);
            Ok(img)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

/// Stratified split by label vector with exact overall sizes.
pub fn split_dataset(images: &[LabeledImage], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if images.len() < 3 {
        return Err(invalid(format!("need at least 3 images to split, got {}", images.len())));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(invalid("every split fraction must be > 0"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("split fractions must sum to 1"));
    }
    let n = images.len();
    // overall targets: round val/test, train takes the rest; every split non-empty
    let mut target = [0usize; 3];
    target[1] = ((fractions[1] * n as f64).round() as usize).max(1);
    target[2] = ((fractions[2] * n as f64).round() as usize).max(1);
    while target[1] + target[2] > n - 1 {
        if target[1] >= target[2] {
            target[1] -= 1;
        } else {
            target[2] -= 1;
        }
    }
    target[0] = n - target[1] - target[2];

    let mut groups: BTreeMap<LabelVector, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        groups.entry(img.labels).or_default().push(i);
    }
    let mut rng = seed::rng_for(seed, "split");
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
    }

    // largest-remainder apportionment of each group across the three splits
    let keys: Vec<LabelVector> = groups.keys().copied().collect();
    let mut alloc = vec![[0usize; 3]; keys.len()];
    let mut used = [0usize; 3];
    let mut remainders = Vec::new();
    for (gi, k) in keys.iter().enumerate() {
        let g = groups[k].len();
        for s in 0..3 {
            let q = g as f64 * fractions[s];
            alloc[gi][s] = q.floor() as usize;
            used[s] += alloc[gi][s];
            remainders.push((q - q.floor(), gi, s));
        }
    }
    // stable order: larger remainder first, ties by group then split
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let group_left = |alloc: &[[usize; 3]], gi: usize| groups[&keys[gi]].len() - alloc[gi].iter().sum::<usize>();
    for (_, gi, s) in &remainders {
        if used[*s] < target[*s] && group_left(&alloc, *gi) > 0 {
            alloc[*gi][*s] += 1;
            used[*s] += 1;
        }
    }
    // anything still unplaced goes to splits with spare capacity
    for gi in 0..keys.len() {
        while group_left(&alloc, gi) > 0 {
            let s = (0..3).find(|s| used[*s] < target[*s]).expect("capacity matches image count");
            alloc[gi][s] += 1;
            used[s] += 1;
        }
    }
    // floors can overshoot a target only when targets were clamped; move extras
    for s in 0..3 {
        while used[s] > target[s] {
            let to = (0..3).find(|t| used[*t] < target[*t]).expect("total preserved");
            let gi = (0..keys.len()).find(|g| alloc[*g][s] > 0).expect("split non-empty");
            alloc[gi][s] -= 1;
            alloc[gi][to] += 1;
            used[s] -= 1;
            used[to] += 1;
        }
    }

    let mut out: [Vec<String>; 3] = Default::default();
    for (gi, k) in keys.iter().enumerate() {
        let members = &groups[k];
        let mut pos = 0;
        for s in 0..3 {
            for &i in &members[pos..pos + alloc[gi][s]] {
                out[s].push(images[i].id.clone());
            }
            pos += alloc[gi][s];
        }
    }
    let [train, validation, test] = out;
    Ok(DatasetSplit { train, validation, test, fractions })
}

/// Partition `images` by a split, preserving input order.
pub fn apply_split(images: &[LabeledImage], split: &DatasetSplit) -> [Vec<LabeledImage>; 3] {
    let mut which: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, ids) in [&split.train, &split.validation, &split.test].into_iter().enumerate() {
        for id in ids {
            which.insert(id.as_str(), s);
        }
    }
    let mut out: [Vec<LabeledImage>; 3] = Default::default();
    for img in images {
        if let Some(&s) = which.get(img.id.as_str()) {
            out[s].push(img.clone());
        }
    }
    out
}

/// Result of [`load_image_folder`]: loaded images plus one message per skipped row.
#[derive(Debug)]
pub struct FolderLoad {
    pub images: Vec<LabeledImage>,
    pub warnings: Vec<String>,
}

/// Load `{dir}/{id}.png` for every row of a label CSV with header `id` plus
/// the 14 finding names (any column order).
pub fn load_image_folder(dir: &Path, label_file: &Path) -> Result<FolderLoad> {
    let bad = |detail: String| Error::LabelFile { path: label_file.to_path_buf(), detail };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(label_file)?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = col("id").ok_or_else(|| bad("missing `id` column".into()))?;
    let missing: Vec<&str> = FINDINGS.iter().copied().filter(|f| col(f).is_none()).collect();
    if !missing.is_empty() {
        return Err(bad(format!("missing columns: {}", missing.join(", "))));
    }
    let finding_cols: Vec<usize> = FINDINGS.iter().map(|f| col(f).unwrap()).collect();

    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(format!("row {}: {e}", row_no + 2)))?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(bad(format!("row {}: empty id", row_no + 2)));
        }
        let values = finding_cols
            .iter()
            .map(|&c| match rec.get(c).unwrap_or("") {
                "1" | "1.0" => Ok(1.0),
                "0" | "0.0" | "" => Ok(0.0),
                other => Err(bad(format!("row {}: non-binary cell `{other}`", row_no + 2))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let labels = LabelVector::from_binary(&values).map_err(|e| bad(format!("row {}: {e}", row_no + 2)))?;
        let path: PathBuf = dir.join(format!("{id}.png"));
        if !path.exists() {
            let msg = format!("row {}: image {} not found, skipped", row_no + 2, path.display());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let img = imageio::read_gray_png(&path)?;
        if img.width != img.height {
            return Err(Error::Image { path, detail: format!("non-square image {}x{}", img.width, img.height) });
        }
        if !img.width.is_power_of_two() {
            return Err(Error::Image { path, detail: format!("side {} is not a power of two", img.width) });
        }
        images.push(LabeledImage::new(id, img.width, img.pixels, labels)?);
    }
    Ok(FolderLoad { images, warnings })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: LabelVector,
    pub path: String,
}

/// Write every image as `{dir}/{id}.png` and return manifest entries.
pub fn write_images(dir: &Path, images: &[LabeledImage]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    images
        .iter()
        .map(|img| {
            let name = format!("{}.png", img.id);
            imageio::write_gray_png(&dir.join(&name), img.size, img.size, &img.pixels)?;
            Ok(ManifestEntry { id: img.id.clone(), labels: img.labels, path: name })
        })
        .collect()
}

/// Label CSV in the format [`load_image_folder`] reads.
pub fn write_label_csv(path: &Path, images: &[LabeledImage]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id"];
    header.extend(FINDINGS);
    w.write_record(&header)?;
    for img in images {
        let mut row = vec![img.id.clone()];
        row.extend(img.labels.bits().iter().map(|b| if *b { "1".to_string() } else { "0".to_string() }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(labels: &[FindingLabel]) -> LabelVector {
        LabelVector::from_labels(labels).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let l = lv(&[FindingLabel::EDEMA, FindingLabel::FRACTURE]);
        let a = generate_phantom(&l, 64, 9).unwrap();
        let b = generate_phantom(&l, 64, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&l, 64, 10).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn no_finding_stays_below_motif_threshold() {
        for seed in 0..20 {
            let img = generate_phantom(&lv(&[FindingLabel::NO_FINDING]), 64, seed).unwrap();
            let max = img.pixels.iter().copied().fold(0.0, f64::max);
            assert!(max < MOTIF_THRESHOLD, "seed {seed}: background max {max}");
        }
    }

    #[test]
    fn every_motif_is_visible() {
        for label in FindingLabel::all().skip(1) {
            let base = generate_phantom(&lv(&[FindingLabel::NO_FINDING]), 64, 3).unwrap();
            let img = generate_phantom(&lv(&[label]), 64, 3).unwrap();
            let changed = img.pixels.iter().zip(&base.pixels).filter(|(a, b)| (*a - *b).abs() > 0.1).count();
            assert!(changed >= 4, "{label}: only {changed} pixels changed");
        }
    }

    #[test]
    fn cardiomegaly_raises_the_central_ellipse() {
        let n = 64;
        let card = generate_phantom(&lv(&[FindingLabel::CARDIOMEGALY]), n, 0).unwrap();
        let bg = generate_phantom(&lv(&[FindingLabel::NO_FINDING]), n, 0).unwrap();
        // core region: inside the ellipse for every jitter, edge softening excluded
        let (cx, cy) = CARDIO_CENTER;
        let core = (CARDIO_RADII.0 - CARDIO_JITTER - 0.03, CARDIO_RADII.1 - CARDIO_JITTER - 0.03);
        let outer = (CARDIO_RADII.0 * (1.0 + CARDIO_GROWTH) + CARDIO_JITTER + 0.03, CARDIO_RADII.1 * (1.0 + CARDIO_GROWTH) + CARDIO_JITTER + 0.03);
        let (mut cin, mut bin, mut cout, mut bout, mut nin, mut nout) = (0.0, 0.0, 0.0, 0.0, 0, 0);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((j as f64 + 0.5) / n as f64, (i as f64 + 0.5) / n as f64);
                let k = i * n + j;
                if ellipse_dist(x, y, cx, cy, core.0, core.1) < 0.0 {
                    cin += card.pixels[k];
                    bin += bg.pixels[k];
                    nin += 1;
                } else if ellipse_dist(x, y, cx, cy, outer.0, outer.1) > 0.0 {
                    cout += card.pixels[k];
                    bout += bg.pixels[k];
                    nout += 1;
                }
            }
        }
        let (cin, bin, cout, bout) = (cin / nin as f64, bin / nin as f64, cout / nout as f64, bout / nout as f64);
        // the motif adds exactly the gain inside the core and nothing far outside
        assert!((cin - bin - CARDIOMEGALY_GAIN).abs() < 1e-9);
        assert!((cout - bout).abs() < 1e-12);
        let margin = CARDIOMEGALY_GAIN + (bin - bout);
        assert!(cin - cout >= margin - 1e-9, "inside {cin} outside {cout} margin {margin}");
        assert!(cin - cout > 0.25);
    }

    #[test]
    fn rejects_bad_size_and_labels() {
        assert!(matches!(
            generate_phantom(&lv(&[FindingLabel::EDEMA]), 48, 0),
            Err(Error::UnsupportedSize(48))
        ));
        assert!(LabelVector::from_labels(&[FindingLabel::NO_FINDING, FindingLabel::EDEMA]).is_err());
    }

    #[test]
    fn dataset_counts_and_histograms() {
        let spec = DatasetSpec { multi_label_fraction: 0.0, ..DatasetSpec::new(10, 32) };
        let d = make_dataset_with(&spec, 1).unwrap();
        assert_eq!(d.len(), 60);

        let spec = DatasetSpec::new(5, 32);
        let a = make_dataset_with(&spec, 1).unwrap();
        let b = make_dataset_with(&spec, 2).unwrap();
        let hist = |d: &[LabeledImage]| {
            let mut h = BTreeMap::new();
            for img in d {
                *h.entry(img.labels).or_insert(0usize) += 1;
            }
            h
        };
        assert_eq!(hist(&a), hist(&b));
        assert_eq!(a.len(), 30 + 6);
        assert!(a.iter().zip(&b).any(|(x, y)| x.pixels != y.pixels));
        assert!(a.iter().all(|img| !img.labels.has(FindingLabel::NO_FINDING) || img.labels.labels().len() == 1));
        assert!(make_dataset(3, 32, &[], 0).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let spec = DatasetSpec { multi_label_fraction: 0.0, classes: vec![FindingLabel::EDEMA, FindingLabel::CARDIOMEGALY], ..DatasetSpec::new(50, 32) };
        let d = make_dataset_with(&spec, 4).unwrap();
        let s = split_dataset(&d, DEFAULT_SPLIT, 0).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 15));
        let mut all: Vec<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert!(split_dataset(&d, [1.0, 0.0, 0.0], 0).is_err());
        assert!(split_dataset(&d[..2], DEFAULT_SPLIT, 0).is_err());
        assert_eq!(s, split_dataset(&d, DEFAULT_SPLIT, 0).unwrap());
    }

    #[test]
    fn split_is_stratified() {
        let d = make_dataset_with(&DatasetSpec::new(30, 32), 5).unwrap();
        let s = split_dataset(&d, DEFAULT_SPLIT, 11).unwrap();
        let [tr, va, te] = apply_split(&d, &s);
        for class in BENCH_CLASSES {
            let single = LabelVector::single(class);
            let frac = |set: &[LabeledImage]| set.iter().filter(|i| i.labels == single).count() as f64 / set.len() as f64;
            let global = frac(&d);
            for part in [&tr, &va, &te] {
                assert!((frac(part) - global).abs() < 0.05, "{class}: {} vs {global}", frac(part));
            }
        }
    }
}
