//! Six-head phantom classifier, AUROC / F1, and the real + synthetic
//! augmentation benchmark with an in-domain and a shifted test set.

use std::collections::BTreeMap;

use autograd::{clip_global_norm, Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use crate::checkpoint::{quantize_f32, Checkpoint};
use crate::codec::image_batch;
use crate::denoiser::EpochSampler;
use crate::error::{invalid, Error, Result};
use crate::findings::{FindingLabel, LabelVector, BENCH_CLASSES};
use crate::imageio::GrayImage;
use crate::metrics::FeatureExtractor;
use crate::nn;
use crate::phantom::{make_dataset_with, DatasetSpec, LabeledImage, PhantomStyle};
use crate::seed;

const WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const F1_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { iterations: 800, batch_size: 32, lr: 2e-3 }
    }
}

/// Four strided conv blocks, global average pooling, one logit per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub params: ParamSet,
    pub classes: Vec<FindingLabel>,
}

impl ClassifierModel {
    pub fn init(classes: &[FindingLabel], seed: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(invalid("classifier needs at least one class"));
        }
        let mut rng = seed::rng_for(seed, "classifier/init");
        let mut p = ParamSet::new();
        let mut cin = 1;
        for (i, &w) in WIDTHS.iter().enumerate() {
            nn::init_conv(&mut p, &format!("block{i}"), cin, w, 3, &mut rng);
            cin = w;
        }
        nn::init_linear(&mut p, "head", cin, classes.len(), true, &mut rng);
        Ok(Self { params: p, classes: classes.to_vec() })
    }

    pub fn feature_dim(&self) -> usize {
        WIDTHS[WIDTHS.len() - 1]
    }

    fn features_var(g: &mut Graph, b: &autograd::Binding, x: Var) -> Var {
        let mut h = x;
        for i in 0..WIDTHS.len() {
            h = nn::conv(g, b, &format!("block{i}"), h, 2, 1);
            h = g.silu(h);
        }
        g.global_avg_pool(h)
    }

    fn run(&self, images: &[GrayImage], head: bool) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = gray_batch(chunk)?;
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false);
            let xv = g.input(x);
            let mut y = Self::features_var(&mut g, &b, xv);
            if head {
                y = nn::linear(&mut g, &b, "head", y);
                y = g.sigmoid(y);
            }
            let v = g.value(y);
            let d = v.shape()[1];
            out.extend(v.data().chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Per-class probabilities in [0, 1].
    pub fn predict(&self, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
        self.run(images, true)
    }

    /// Penultimate (pooled) activations.
    pub fn features(&self, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
        self.run(images, false)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let names: Vec<&str> = self.classes.iter().map(|c| c.name()).collect();
        Checkpoint::new(serde_json::json!({ "kind": "classifier", "classes": names }), self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "classifier" {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let classes: Vec<FindingLabel> = serde_json::from_value(
            ck.metadata.get("classes").cloned().ok_or_else(|| Error::Checkpoint("missing `classes`".into()))?,
        )?;
        nn::check_same_layout(&Self::init(&classes, 0)?.params, &ck.tensors)?;
        Ok(Self { params: ck.tensors.clone(), classes })
    }
}

impl FeatureExtractor for ClassifierModel {
    fn name(&self) -> &str {
        "phantom-classifier-penultimate"
    }

    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn extract(&self, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
        self.features(images)
    }
}

fn gray_batch(images: &[GrayImage]) -> Result<Tensor> {
    let (w, h) = images.first().map(|i| (i.width, i.height)).ok_or_else(|| invalid("empty image batch"))?;
    if images.iter().any(|i| (i.width, i.height) != (w, h)) {
        return Err(Error::Shape("images in a batch must share a size".into()));
    }
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data))
}

pub fn to_gray(images: &[LabeledImage]) -> Vec<GrayImage> {
    images.iter().map(|i| GrayImage { width: i.size, height: i.size, pixels: i.pixels.clone() }).collect()
}

/// Binary cross-entropy per head over `classes`; labels outside are ignored.
pub fn train_classifier(
    train: &[LabeledImage],
    classes: &[FindingLabel],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierModel> {
    if train.is_empty() {
        return Err(invalid("classifier training set is empty"));
    }
    if config.iterations == 0 || config.batch_size == 0 {
        return Err(invalid("iterations and batch size must be positive"));
    }
    let mut model = ClassifierModel::init(classes, seed)?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut rng = seed::rng_for(seed, "classifier/order");
    let mut sampler = EpochSampler::new(train.len());
    for it in 0..config.iterations {
        let idx = sampler.next_batch(config.batch_size.min(train.len()), &mut rng);
        let batch: Vec<LabeledImage> = idx.iter().map(|&i| train[i].clone()).collect();
        let x = image_batch(&batch)?;
        let targets: Vec<f64> = batch.iter().flat_map(|i| i.labels.project(classes)).collect();
        let targets = Tensor::new(vec![batch.len(), classes.len()], targets);
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, true);
        let xv = g.input(x);
        let f = ClassifierModel::features_var(&mut g, &b, xv);
        let logits = nn::linear(&mut g, &b, "head", f);
        let loss = g.bce_with_logits(logits, &targets);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("classifier loss {lv}") });
        }
        let mut grads = g.backward(loss);
        let mut gmap = b.grads(&g, &mut grads);
        clip_global_norm(&mut gmap, 1.0);
        opt.step(&mut model.params, &gmap, nn::cosine_lr(config.lr, it, config.iterations));
    }
    quantize_f32(&mut model.params);
    Ok(model)
}

/// Mann-Whitney U / (n_pos n_neg); ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// F1 of `score >= threshold`; 0 when precision + recall = 0.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        match (*s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Source of synthetic, single-finding training images.
pub trait SynthSource {
    fn synthesize(&self, label: FindingLabel, n: usize, seed: u64) -> Result<Vec<GrayImage>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchProtocol {
    pub n_real_per_class: usize,
    pub n_synth_per_class: usize,
    pub size: usize,
    pub seeds: Vec<u64>,
    pub n_test_per_class: usize,
    pub test_seed: u64,
    pub classes: Vec<FindingLabel>,
    pub classifier: ClassifierConfig,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            n_real_per_class: 20,
            n_synth_per_class: 200,
            size: 64,
            seeds: vec![0, 1, 2],
            n_test_per_class: 50,
            test_seed: 0x7e57,
            classes: BENCH_CLASSES.to_vec(),
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub condition: String,
    pub test_set: String,
    pub seed: u64,
    pub class: String,
    pub auroc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub condition: String,
    pub test_set: String,
    pub class: String,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub protocol: BenchProtocol,
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<BenchAggregate>,
}

pub const NO_AUG: &str = "no-aug";
pub const AUG: &str = "aug";
pub const IN_DOMAIN: &str = "in-domain";
pub const SHIFTED: &str = "shifted";

impl BenchReport {
    pub fn aggregate(&self, condition: &str, test_set: &str, class: &str) -> Option<&BenchAggregate> {
        self.aggregates.iter().find(|a| a.condition == condition && a.test_set == test_set && a.class == class)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub fn bench_test_sets(protocol: &BenchProtocol) -> Result<[Vec<LabeledImage>; 2]> {
    let spec = DatasetSpec {
        classes: protocol.classes.clone(),
        ..DatasetSpec::new(protocol.n_test_per_class, protocol.size)
    };
    let in_domain = make_dataset_with(&spec, seed::derive(protocol.test_seed, "bench/test"))?;
    let shifted_spec = DatasetSpec { style: PhantomStyle::shifted(), ..spec };
    let shifted = make_dataset_with(&shifted_spec, seed::derive(protocol.test_seed, "bench/shifted"))?;
    Ok([in_domain, shifted])
}

fn evaluate(model: &ClassifierModel, test: &[LabeledImage]) -> Result<Vec<(f64, f64)>> {
    let probs = model.predict(&to_gray(test))?;
    (0..model.classes.len())
        .map(|k| {
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let labels: Vec<bool> = test.iter().map(|i| i.labels.has(model.classes[k])).collect();
            Ok((auroc(&scores, &labels)?, f1(&scores, &labels, F1_THRESHOLD)?))
        })
        .collect()
}

fn run_seed(source: &(dyn SynthSource + Sync), protocol: &BenchProtocol, tests: &[Vec<LabeledImage>; 2], s: u64) -> Result<Vec<BenchRow>> {
    let real_spec = DatasetSpec {
        classes: protocol.classes.clone(),
        multi_label_fraction: 0.0,
        ..DatasetSpec::new(protocol.n_real_per_class, protocol.size)
    };
    let real = make_dataset_with(&real_spec, seed::derive(s, "bench/real"))?;
    let mut augmented = real.clone();
    for &c in &protocol.classes {
        let imgs = source.synthesize(c, protocol.n_synth_per_class, seed::derive_index(s, "bench/synth", c.index() as u64))?;
        for (i, img) in imgs.into_iter().enumerate() {
            if img.width != protocol.size || img.height != protocol.size {
                return Err(Error::Shape(format!("synthetic image {}x{} in a {} bench", img.width, img.height, protocol.size)));
            }
            augmented.push(LabeledImage::new(format!("syn-{}-{i}", c.index()), protocol.size, img.pixels, LabelVector::single(c))?);
        }
    }
    let train_seed = seed::derive(s, "bench/classifier");
    let mut rows = Vec::new();
    for (condition, data) in [(NO_AUG, &real), (AUG, &augmented)] {
        let model = train_classifier(data, &protocol.classes, &protocol.classifier, train_seed)?;
        for (test_name, test) in [(IN_DOMAIN, &tests[0]), (SHIFTED, &tests[1])] {
            for (k, (a, f)) in evaluate(&model, test)?.into_iter().enumerate() {
                rows.push(BenchRow {
                    condition: condition.into(),
                    test_set: test_name.into(),
                    seed: s,
                    class: protocol.classes[k].name().into(),
                    auroc: a,
                    f1: f,
                });
            }
        }
        log::info!("bench seed {s} {condition} done");
    }
    Ok(rows)
}

/// For each seed: draw real training phantoms, synthesise, train both arms on
/// identical seeds, and score both test sets. Seeds run in parallel on the
/// current rayon pool; rows keep seed order.
pub fn run_augmentation_bench(source: &(dyn SynthSource + Sync), protocol: &BenchProtocol) -> Result<BenchReport> {
    if protocol.seeds.is_empty() {
        return Err(invalid("bench protocol needs at least one seed"));
    }
    if protocol.n_real_per_class == 0 {
        return Err(invalid("bench protocol needs real images"));
    }
    let tests = bench_test_sets(protocol)?;
    let per_seed: Vec<Vec<BenchRow>> =
        protocol.seeds.par_iter().map(|&s| run_seed(source, protocol, &tests, s)).collect::<Result<_>>()?;
    let rows: Vec<BenchRow> = per_seed.into_iter().flatten().collect();
    let mut groups: BTreeMap<(String, String, String), Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.condition.clone(), r.test_set.clone(), r.class.clone())).or_default().push(r);
    }
    let aggregates = groups
        .into_iter()
        .map(|((condition, test_set, class), rs)| {
            let (am, asd) = mean_std(&rs.iter().map(|r| r.auroc).collect::<Vec<_>>());
            let (fm, fsd) = mean_std(&rs.iter().map(|r| r.f1).collect::<Vec<_>>());
            BenchAggregate { condition, test_set, class, auroc_mean: am, auroc_std: asd, f1_mean: fm, f1_std: fsd }
        })
        .collect();
    Ok(BenchReport { protocol: protocol.clone(), rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0.9, 0.1], &[true, false], 0.5).unwrap(), 1.0);
        assert_eq!(f1(&[0.1, 0.9], &[true, false], 0.5).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let v = f1(&[0.9, 0.8, 0.7, 0.1], &[true, true, false, true], 0.5).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert!(f1(&[0.5], &[true], 1.0).is_err());
    }

    #[test]
    fn classifier_outputs_are_probabilities() {
        let m = ClassifierModel::init(&BENCH_CLASSES, 0).unwrap();
        let img = GrayImage { width: 64, height: 64, pixels: vec![0.3; 4096] };
        let p = m.predict(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|v| v.len() == 6 && v.iter().all(|x| (0.0..=1.0).contains(x))));
        assert_eq!(m.features(&[img]).unwrap()[0].len(), 64);
    }
}
