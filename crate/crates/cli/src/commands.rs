//! The pipeline stages. Each command checks its upstream artifacts, writes
//! its outputs plus `config.txt` and `run.json` into its own directory, and
//! derives every seed from the global one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ldm_core::autograd::{ParamSet, Tensor};
use ldm_core::bench::{self, BenchProtocol, ClassifierConfig, AUG, NO_AUG, SHIFTED};
use ldm_core::checkpoint::Checkpoint;
use ldm_core::codec::{self, CodecParams, CodecTrainConfig};
use ldm_core::conditioning::{embed_labels, labels_to_prompt, prompt_table_json};
use ldm_core::denoiser::{self, DenoiserConfig, DenoiserParams, TrainConfig};
use ldm_core::findings::{FindingLabel, LabelVector};
use ldm_core::imageio::{grid, write_gray_png, GrayImage};
use ldm_core::lora::{self, AdapterSet};
use ldm_core::metrics::{evaluate_generation, MetricReport};
use ldm_core::multidiffusion::plan_tiles;
use ldm_core::phantom::{self, DatasetSpec, DatasetSplit, LabeledImage};
use ldm_core::pipeline::{Generator, GeneratorSource, SampleOptions};
use ldm_core::scheduler::NoiseSchedule;
use ldm_core::seed;
use ldm_core::upscaler::{self, ResidualDecay, StageConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    MakeData,
    TrainCodec,
    TrainDenoiser,
    FinetuneLora,
    Generate,
    Upscale,
    Evaluate,
    Augbench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::TrainCodec => "train-codec",
            Command::TrainDenoiser => "train-denoiser",
            Command::FinetuneLora => "finetune-lora",
            Command::Generate => "generate",
            Command::Upscale => "upscale",
            Command::Evaluate => "evaluate",
            Command::Augbench => "augbench",
        }
    }

    /// Directory the command writes into.
    pub fn output_dir(self, cfg: &RunConfig) -> PathBuf {
        let out = cfg.out_dir();
        match self {
            Command::MakeData => cfg.data_path(),
            Command::TrainCodec => out.join("codec"),
            Command::TrainDenoiser => out.join("denoiser"),
            Command::FinetuneLora => out.join("lora"),
            Command::Generate => cfg.samples_path(),
            Command::Upscale => out.join("upscale"),
            Command::Evaluate => out.join("evaluate"),
            Command::Augbench => out.join("augbench"),
        }
    }
}

/// Run `cmd` on a pool of `cfg.workers` threads.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let dir = cmd.output_dir(cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    let run_info = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.content_hash(),
    });
    write_json(&dir.join("run.json"), &run_info)?;
    ldm_core::with_workers(cfg.workers, || match cmd {
        Command::MakeData => make_data(cfg, &dir),
        Command::TrainCodec => train_codec(cfg, &dir),
        Command::TrainDenoiser => train_denoiser(cfg, &dir),
        Command::FinetuneLora => finetune_lora(cfg, &dir),
        Command::Generate => generate(cfg, &dir),
        Command::Upscale => upscale(cfg, &dir),
        Command::Evaluate => evaluate(cfg, &dir),
        Command::Augbench => augbench(cfg, &dir),
    })??;
    log::info!("{} finished in {:.1}s; outputs in {}", cmd.name(), start.elapsed().as_secs_f64(), dir.display());
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))
}

fn require(path: &Path, what: &str, key: &str, producer: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found at {}: run `ldm {producer}` first or point --{key} at an existing file", path.display());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn sub_seed(cfg: &RunConfig, label: &str) -> u64 {
    seed::derive(cfg.seed, label)
}

/// Folder-name form of a label set, e.g. `lung_opacity+edema`.
fn slug(labels: &LabelVector) -> String {
    labels.names().iter().map(|n| n.to_lowercase().replace(' ', "_")).collect::<Vec<_>>().join("+")
}

fn classes(cfg: &RunConfig) -> Result<Vec<FindingLabel>> {
    cfg.class_list().map_err(anyhow::Error::msg)
}

struct Dataset {
    all: Vec<LabeledImage>,
    train: Vec<LabeledImage>,
    validation: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
}

/// Images from `<data-dir>/images` with `labels.csv`; uses `split.json` when
/// present and a seeded stratified split otherwise.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_path();
    let labels = dir.join("labels.csv");
    require(&labels, "label file", "data-dir", "make-data")?;
    let load = phantom::load_image_folder(&dir.join("images"), &labels)?;
    if load.images.is_empty() {
        bail!("no images could be loaded from {}", dir.display());
    }
    let split_path = dir.join("split.json");
    let split: DatasetSplit = if split_path.is_file() {
        serde_json::from_str(&std::fs::read_to_string(&split_path)?).with_context(|| format!("malformed {}", split_path.display()))?
    } else {
        let fractions = cfg.split_fractions().map_err(anyhow::Error::msg)?;
        phantom::split_dataset(&load.images, fractions, sub_seed(cfg, "cli/split"))?
    };
    let [train, validation, test] = phantom::apply_split(&load.images, &split);
    Ok(Dataset { all: load.images, train, validation, test })
}

fn make_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let spec = DatasetSpec {
        classes: classes(cfg)?,
        multi_label_fraction: cfg.multi_label_fraction,
        ..DatasetSpec::new(cfg.n_per_class, cfg.image_size)
    };
    let images = phantom::make_dataset_with(&spec, sub_seed(cfg, "cli/data"))?;
    let fractions = cfg.split_fractions().map_err(anyhow::Error::msg)?;
    let split = phantom::split_dataset(&images, fractions, sub_seed(cfg, "cli/split"))?;
    let manifest = phantom::write_images(&dir.join("images"), &images)?;
    phantom::write_label_csv(&dir.join("labels.csv"), &images)?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join("manifest.json"), &json!({ "spec": spec, "images": manifest }))?;
    std::fs::write(dir.join("prompt_table.json"), prompt_table_json(&spec.classes)? + "\n")?;
    log::info!(
        "{} images: {} train, {} validation, {} test",
        images.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn train_codec(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let config = CodecTrainConfig {
        factor: cfg.codec_factor,
        latent_channels: cfg.codec_channels,
        iterations: cfg.codec_iterations,
        batch_size: cfg.codec_batch,
        lr: cfg.codec_lr,
        eval_every: cfg.codec_eval_every,
        scale_consistency: cfg.codec_consistency,
        consistency_images: cfg.codec_consistency_images,
    };
    let (model, report) = codec::train_codec(&data.train, &data.validation, &config, sub_seed(cfg, "cli/codec"))?;
    let test_mse = if data.test.is_empty() { None } else { Some(model.reconstruction_mse(&data.test)?) };
    model.to_checkpoint().save(&dir.join("codec.ckpt"))?;
    log::info!("codec validation MSE {:.5}, test MSE {:?}", report.best_mse, test_mse);

    let shown: Vec<&LabeledImage> = data.test.iter().chain(&data.validation).take(8).collect();
    let mut tiles = Vec::new();
    for img in &shown {
        let rec = model.decode(&model.encode_square(img.size, &img.pixels)?)?;
        tiles.push(img.pixels.clone());
        tiles.push(rec.pixels);
    }
    if let Some(first) = shown.first() {
        let refs: Vec<&[f64]> = tiles.iter().map(|v| v.as_slice()).collect();
        let g = grid(&refs, first.size, 4);
        write_gray_png(&dir.join("reconstructions.png"), g.width, g.height, &g.pixels)?;
    }
    write_json(
        &dir.join("report.json"),
        &json!({
            "config": config,
            "num_parameters": model.num_parameters(),
            "validation_mse": report.best_mse,
            "test_mse": test_mse,
            "training": report,
        }),
    )
}

fn load_codec(cfg: &RunConfig) -> Result<CodecParams> {
    let path = cfg.codec_path();
    require(&path, "codec checkpoint", "codec", "train-codec")?;
    Ok(CodecParams::from_checkpoint(&load_checkpoint(&path)?)?)
}

fn train_config(cfg: &RunConfig, iterations: usize, batch_size: usize, lr: f64, label: &str) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size,
        iterations,
        gamma: cfg.gamma,
        guidance_dropout: cfg.guidance_dropout,
        grad_clip: cfg.grad_clip,
        seed: sub_seed(cfg, label),
    }
}

fn train_denoiser(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let codec = load_codec(cfg)?;
    let data = load_dataset(cfg)?;
    let excluded = cfg.excluded_classes();
    let train: Vec<LabeledImage> =
        data.train.into_iter().filter(|img| !excluded.iter().any(|c| img.labels.has(*c))).collect();
    if train.is_empty() {
        bail!("no training images left after excluding {:?}", cfg.exclude_classes);
    }
    let config = train_config(cfg, cfg.den_iterations, cfg.den_batch, cfg.den_lr, "cli/denoiser");
    let init = DenoiserParams::init(DenoiserConfig { latent_channels: codec.latent_channels, ..Default::default() }, sub_seed(cfg, "cli/denoiser/init"))?;
    let n_params = init.num_parameters();
    let schedule = NoiseSchedule::default();
    let (model, report) = denoiser::train_denoiser(init, &codec, &train, &schedule, &config)?;
    model.to_checkpoint().save(&dir.join("denoiser.ckpt"))?;
    log::info!("denoiser validation loss {:.4} -> {:.4}", report.validation_start, report.validation_end);
    write_json(
        &dir.join("report.json"),
        &json!({
            "config": config,
            "num_parameters": n_params,
            "train_images": train.len(),
            "excluded_classes": excluded.iter().map(|c| c.name()).collect::<Vec<_>>(),
            "training": report,
        }),
    )
}

fn load_denoiser(cfg: &RunConfig) -> Result<DenoiserParams> {
    let path = cfg.denoiser_path();
    require(&path, "denoiser checkpoint", "denoiser", "train-denoiser")?;
    Ok(DenoiserParams::from_checkpoint(&load_checkpoint(&path)?)?)
}

fn finetune_lora(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let codec = load_codec(cfg)?;
    let base = load_denoiser(cfg)?;
    let data = load_dataset(cfg)?;
    let allowed = cfg.lora_class_list().map_err(anyhow::Error::msg)?;
    let train: Vec<LabeledImage> =
        data.train.into_iter().filter(|img| img.labels.labels().iter().all(|c| allowed.contains(c))).collect();
    if train.is_empty() {
        bail!("no training images carry only the classes in lora-classes");
    }
    let adapters = lora::init_adapters(&base.attachment_registry(), cfg.lora_rank, cfg.lora_alpha, sub_seed(cfg, "cli/lora/init"))?;
    let config = train_config(cfg, cfg.lora_iterations, cfg.lora_batch, cfg.lora_lr, "cli/lora");
    let schedule = NoiseSchedule::default();
    let (adapters, report) = lora::finetune_lora(&base, adapters, &codec, &train, &schedule, &config)?;
    adapters.to_checkpoint().save(&dir.join("adapters.ckpt"))?;
    let accounting = lora::parameter_accounting(&base, &adapters);
    log::info!(
        "adapter validation loss {:.4} -> {:.4}; {} trainable values",
        report.validation_start,
        report.validation_end,
        accounting.trainable
    );
    write_json(
        &dir.join("report.json"),
        &json!({
            "config": config,
            "rank": cfg.lora_rank,
            "alpha": cfg.lora_alpha,
            "train_images": train.len(),
            "parameters": accounting,
            "training": report,
        }),
    )
}

struct Models {
    codec: CodecParams,
    denoiser: DenoiserParams,
    adapters: Option<AdapterSet>,
    schedule: NoiseSchedule,
}

impl Models {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let codec = load_codec(cfg)?;
        let denoiser = load_denoiser(cfg)?;
        let adapters = if cfg.use_lora {
            let path = cfg.adapters_path();
            if !path.is_file() {
                bail!(
                    "adapter checkpoint not found at {}: run `ldm finetune-lora` first, point --adapters at a file, or pass --use-lora false",
                    path.display()
                );
            }
            let a = AdapterSet::from_checkpoint(&load_checkpoint(&path)?)?;
            a.check_against(&denoiser.attachment_registry())?;
            Some(a)
        } else {
            None
        };
        if codec.latent_channels != denoiser.config.latent_channels {
            bail!(
                "codec has {} latent channels but the denoiser expects {}",
                codec.latent_channels,
                denoiser.config.latent_channels
            );
        }
        Ok(Self { codec, denoiser, adapters, schedule: NoiseSchedule::default() })
    }

    fn generator(&self) -> Generator<'_> {
        Generator { denoiser: &self.denoiser, adapters: self.adapters.as_ref(), codec: &self.codec, schedule: &self.schedule }
    }

    fn base_generator(&self) -> Generator<'_> {
        Generator { adapters: None, ..self.generator() }
    }

    /// Latent side of the trained image size.
    fn latent_side(&self, cfg: &RunConfig) -> Result<usize> {
        if cfg.image_size % self.codec.factor != 0 {
            bail!("image-size {} is not a multiple of the codec factor {}", cfg.image_size, self.codec.factor);
        }
        Ok(cfg.image_size / self.codec.factor)
    }
}

fn sample_options(cfg: &RunConfig, steps: usize) -> SampleOptions {
    SampleOptions { steps, guidance: cfg.guidance, batch: cfg.sample_batch }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PromptOutput {
    labels: LabelVector,
    prompt: String,
    dir: String,
    images: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GenerateManifest {
    image_side: usize,
    latent_side: usize,
    tile_side: usize,
    steps: usize,
    guidance: f64,
    adapters: bool,
    prompts: Vec<PromptOutput>,
}

fn write_grid(path: &Path, images: &[GrayImage]) -> Result<()> {
    let refs: Vec<&[f64]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    let g = grid(&refs, images[0].width, 8);
    Ok(write_gray_png(path, g.width, g.height, &g.pixels)?)
}

fn generate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let models = Models::load(cfg)?;
    let g = models.generator();
    let tile = models.latent_side(cfg)?;
    let side = if cfg.canvas == 0 { tile } else { cfg.canvas / models.codec.factor };
    let stride = if cfg.stride == 0 { (tile / 2).max(1) } else { cfg.stride };
    let layout = plan_tiles((side, side), (tile, tile), (stride, stride))?;
    let opts = sample_options(cfg, cfg.steps);
    let mut latents = ParamSet::new();
    let mut prompts = Vec::new();
    for (pi, labels) in cfg.prompt_sets().map_err(anyhow::Error::msg)?.iter().enumerate() {
        let cond = embed_labels(labels);
        let s = seed::derive_index(cfg.seed, "cli/generate", pi as u64);
        let z: Vec<Tensor> = if side == tile {
            g.sample_latents(&cond, cfg.n, (side, side), &opts, s)?
        } else {
            (0..cfg.n).map(|i| g.sample_canvas(&cond, &layout, &opts, s, i as u64)).collect::<ldm_core::Result<_>>()?
        };
        let images = g.decode_all(&z)?;
        let name = slug(labels);
        let sub = dir.join(&name);
        std::fs::create_dir_all(&sub)?;
        let mut files = Vec::new();
        for (i, (img, zi)) in images.iter().zip(z).enumerate() {
            let file = format!("{i:03}.png");
            write_gray_png(&sub.join(&file), img.width, img.height, &img.pixels)?;
            latents.insert(format!("{name}/{i:03}"), zi);
            files.push(file);
        }
        if !images.is_empty() {
            write_grid(&sub.join("grid.png"), &images)?;
        }
        log::info!("{}: {} images", labels_to_prompt(labels), images.len());
        prompts.push(PromptOutput { labels: *labels, prompt: labels_to_prompt(labels).text, dir: name, images: files });
    }
    let meta = json!({ "kind": "latents", "factor": models.codec.factor });
    Checkpoint::new(meta, latents).save(&dir.join("latents.ckpt"))?;
    let manifest = GenerateManifest {
        image_side: side * models.codec.factor,
        latent_side: side,
        tile_side: tile,
        steps: cfg.steps,
        guidance: cfg.guidance,
        adapters: models.adapters.is_some(),
        prompts,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn upscale(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let samples = cfg.samples_path();
    let manifest_path = samples.join("manifest.json");
    require(&manifest_path, "generation manifest", "samples-dir", "generate")?;
    let manifest: GenerateManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .with_context(|| format!("malformed {}", manifest_path.display()))?;
    let latents_path = samples.join("latents.ckpt");
    require(&latents_path, "generated latents", "samples-dir", "generate")?;
    let latents = load_checkpoint(&latents_path)?;
    let models = Models::load(cfg)?;
    let g = models.generator();
    let stage = StageConfig {
        tau_start: cfg.tau_start,
        steps: cfg.upscale_steps,
        decay: ResidualDecay::Cosine { kappa: cfg.kappa },
        tiled_weight: cfg.tiled_weight,
        mode: cfg.upsample().map_err(anyhow::Error::msg)?,
    };
    stage.validate()?;
    let tile = (manifest.tile_side, manifest.tile_side);
    let mut entries = Vec::new();
    let mut k = 0u64;
    for p in &manifest.prompts {
        let cond = embed_labels(&p.labels);
        let sub = dir.join(&p.dir);
        std::fs::create_dir_all(&sub)?;
        for file in &p.images {
            let stem = file.trim_end_matches(".png");
            let key = format!("{}/{stem}", p.dir);
            let z = latents.tensors.get(&key).with_context(|| format!("latent `{key}` missing from {}", latents_path.display()))?;
            let outs = g.upscale(z, &cond, cfg.stages, tile, stage, cfg.guidance, seed::derive_index(cfg.seed, "cli/upscale", k))?;
            k += 1;
            let base = g.decode_all(std::slice::from_ref(z))?.remove(0);
            let mut reference = base;
            let mut stage_files = Vec::new();
            let mut structure = Vec::new();
            for (s, img) in g.decode_all(&outs)?.into_iter().enumerate() {
                reference = upscaler::upsample_image(&reference);
                structure.push(upscaler::ncc(&reference.pixels, &img.pixels)?);
                let name = format!("{stem}_x{}.png", 1usize << (s + 1));
                write_gray_png(&sub.join(&name), img.width, img.height, &img.pixels)?;
                stage_files.push(format!("{}/{name}", p.dir));
            }
            entries.push(json!({ "source": key, "stages": stage_files, "ncc_vs_upsampled": structure }));
        }
    }
    log::info!("upscaled {k} images through {} stage(s)", cfg.stages);
    write_json(&dir.join("manifest.json"), &json!({ "stage": stage, "images": entries }))
}

/// Real images carrying exactly one finding, grouped by class name.
fn real_by_class(images: &[LabeledImage], classes: &[FindingLabel]) -> BTreeMap<String, Vec<GrayImage>> {
    classes
        .iter()
        .map(|c| {
            let single = LabelVector::single(*c);
            let chosen: Vec<LabeledImage> = images.iter().filter(|i| i.labels == single).cloned().collect();
            (c.name().to_string(), bench::to_gray(&chosen))
        })
        .collect()
}

fn noise_images(n: usize, side: usize, seed: u64) -> Vec<GrayImage> {
    let mut rng = seed::rng_for(seed, "cli/noise");
    (0..n).map(|_| GrayImage { width: side, height: side, pixels: (0..side * side).map(|_| rng.random::<f64>()).collect() }).collect()
}

fn renamed(report: MetricReport, suffix: &str) -> Vec<ldm_core::metrics::MetricEntry> {
    report
        .entries
        .into_iter()
        .map(|mut e| {
            e.metric = format!("{}_{suffix}", e.metric);
            e
        })
        .collect()
}

fn synth_by_class(g: &Generator, cfg: &RunConfig, classes: &[FindingLabel], side: usize) -> Result<BTreeMap<String, Vec<GrayImage>>> {
    let opts = sample_options(cfg, cfg.steps);
    classes
        .iter()
        .map(|c| {
            let s = seed::derive_index(cfg.seed, "cli/evaluate/synth", c.index() as u64);
            Ok((c.name().to_string(), g.generate(&LabelVector::single(*c), cfg.eval_n, (side, side), &opts, s)?))
        })
        .collect()
}

fn evaluate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let models = Models::load(cfg)?;
    let data = load_dataset(cfg)?;
    let classes = classes(cfg)?;
    let side = models.latent_side(cfg)?;
    if data.all.iter().any(|i| i.size != cfg.image_size) {
        bail!("dataset images are not {}x{} (set --image-size to match)", cfg.image_size, cfg.image_size);
    }
    let clf_config = ClassifierConfig { iterations: cfg.eval_classifier_iterations, ..Default::default() };
    let extractor = bench::train_classifier(&data.train, &classes, &clf_config, sub_seed(cfg, "cli/evaluate/classifier"))?;
    extractor.to_checkpoint().save(&dir.join("classifier.ckpt"))?;

    let real = real_by_class(&data.all, &classes);
    let synth = synth_by_class(&models.generator(), cfg, &classes, side)?;
    let mut entries = evaluate_generation(&real, &synth, &extractor)?.entries;
    if cfg.eval_compare_base && models.adapters.is_some() {
        let base = synth_by_class(&models.base_generator(), cfg, &classes, side)?;
        entries.extend(renamed(evaluate_generation(&real, &base, &extractor)?, "base"));
    }
    let noise: BTreeMap<String, Vec<GrayImage>> = classes
        .iter()
        .map(|c| {
            let s = seed::derive_index(cfg.seed, "cli/evaluate/noise", c.index() as u64);
            (c.name().to_string(), noise_images(cfg.eval_n, cfg.image_size, s))
        })
        .collect();
    entries.extend(renamed(evaluate_generation(&real, &noise, &extractor)?, "noise"));
    let report = MetricReport { entries }.with_config_hash(&cfg.content_hash());
    std::fs::write(dir.join("metrics.json"), report.to_json()? + "\n")?;

    let mut summary = BTreeMap::new();
    for name in real.keys().map(String::as_str).chain([ldm_core::metrics::POOLED]) {
        let fid = report.get("fid", name);
        let fid_noise = report.get("fid_noise", name);
        let row = json!({
            "fid": fid,
            "fid_base": report.get("fid_base", name),
            "fid_noise": fid_noise,
            "vendi": report.get("vendi", name),
            "synth_closer_than_noise": matches!((fid, fid_noise), (Some(a), Some(b)) if a < b),
        });
        log::info!("{name}: {row}");
        summary.insert(name.to_string(), row);
    }
    for (class, imgs) in &synth {
        let n = imgs.len().min(16);
        if n > 0 {
            write_grid(&dir.join(format!("{}.png", class.to_lowercase().replace(' ', "_"))), &imgs[..n])?;
        }
    }
    write_json(&dir.join("summary.json"), &summary)
}

fn augbench(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let models = Models::load(cfg)?;
    let classes = classes(cfg)?;
    let protocol = BenchProtocol {
        n_real_per_class: cfg.bench_real_per_class,
        n_synth_per_class: cfg.bench_synth_per_class,
        size: cfg.image_size,
        seeds: cfg.bench_seed_list().iter().map(|&s| seed::derive_index(cfg.seed, "cli/augbench", s)).collect(),
        n_test_per_class: cfg.bench_test_per_class,
        test_seed: sub_seed(cfg, "cli/augbench/test"),
        classes: classes.clone(),
        classifier: ClassifierConfig { iterations: cfg.bench_classifier_iterations, ..Default::default() },
    };
    models.latent_side(cfg)?;
    let source = GeneratorSource { generator: models.generator(), options: sample_options(cfg, cfg.bench_steps), image_size: cfg.image_size };
    let report = bench::run_augmentation_bench(&source, &protocol)?;
    std::fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    std::fs::write(dir.join("report.csv"), report.to_csv()?)?;

    let mut per_class = BTreeMap::new();
    let mut improved = 0;
    for c in &classes {
        let a = report.aggregate(NO_AUG, SHIFTED, c.name()).context("missing no-aug aggregate")?;
        let b = report.aggregate(AUG, SHIFTED, c.name()).context("missing aug aggregate")?;
        let better = b.auroc_mean >= a.auroc_mean;
        improved += better as usize;
        log::info!("{:18} shifted AUROC {:.3} -> {:.3}", c.name(), a.auroc_mean, b.auroc_mean);
        per_class.insert(
            c.name(),
            json!({
                "auroc_no_aug": a.auroc_mean,
                "auroc_aug": b.auroc_mean,
                "f1_no_aug": a.f1_mean,
                "f1_aug": b.f1_mean,
                "aug_not_worse": better,
            }),
        );
    }
    write_json(
        &dir.join("summary.json"),
        &json!({ "test_set": SHIFTED, "classes": per_class, "classes_not_worse": improved, "n_classes": classes.len() }),
    )
}
