//! Flat key-value run configuration.
//!
//! Every key has a default; a `--config` file (one `key = value` per line,
//! `#` comments) overrides defaults and `--key value` flags override the
//! file. Keys are kebab-case on the command line and in files.

use std::fmt;
use std::path::PathBuf;

use ldm_core::findings::{FindingLabel, LabelVector};
use ldm_core::upscaler::UpsampleMode;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

/// Parsing and canonical printing of one config value type.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

numeric_value!(u64, usize, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

fn kebab(field: &str) -> String {
    field.replace('_', "-")
}

macro_rules! run_config {
    ($( #[doc = $doc:literal] $field:ident : $ty:ty = $default:expr; )*) => {
        /// Resolved settings for one command. Field `foo_bar` is key `foo-bar`.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default.into(), )* }
            }
        }

        impl RunConfig {
            /// (key, description) for every key, in declaration order.
            pub fn keys() -> Vec<(String, &'static str)> {
                vec![$( (kebab(stringify!($field)), $doc.trim()), )*]
            }

            /// Set one key from its string form. `Ok(false)` if the key is unknown.
            pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
                let field = key.replace('-', "_");
                $(
                    if field == stringify!($field) {
                        self.$field = <$ty as ConfigValue>::parse_value(value)?;
                        return Ok(true);
                    }
                )*
                Ok(false)
            }

            /// (key, value) pairs sorted by key.
            pub fn entries(&self) -> Vec<(String, String)> {
                let mut v = vec![$( (kebab(stringify!($field)), self.$field.show()), )*];
                v.sort();
                v
            }
        }
    };
}

run_config! {
    /// global seed; every module derives its own sub-seed from it
    seed: u64 = 0u64;
    /// output directory
    out: String = "runs";
    /// worker threads for parallel sections (0 = all cores)
    workers: usize = 1usize;
    /// log level: error, warn, info, debug or trace
    log_level: String = "info";

    /// dataset directory (default <out>/data)
    data_dir: String = "";
    /// codec checkpoint (default <out>/codec/codec.ckpt)
    codec: String = "";
    /// denoiser checkpoint (default <out>/denoiser/denoiser.ckpt)
    denoiser: String = "";
    /// adapter checkpoint (default <out>/lora/adapters.ckpt)
    adapters: String = "";
    /// generation output read by upscale (default <out>/generate)
    samples_dir: String = "";
    /// apply the LoRA adapters when sampling
    use_lora: bool = true;

    /// phantoms per class
    n_per_class: usize = 84usize;
    /// image side in pixels (32, 64 or 128)
    image_size: usize = 64usize;
    /// comma-separated finding classes
    classes: String = "Cardiomegaly,Lung Opacity,Edema,No Finding,Pneumothorax,Pleural Effusion";
    /// extra two-finding images, as a fraction of the single-finding count
    multi_label_fraction: f64 = 0.2;
    /// train,validation,test fractions
    split: String = "0.7,0.15,0.15";

    /// codec downsampling factor (4 or 8)
    codec_factor: usize = 8usize;
    /// latent channels
    codec_channels: usize = 4usize;
    /// codec training iterations
    codec_iterations: usize = 600usize;
    /// codec batch size
    codec_batch: usize = 8usize;
    /// codec learning rate
    codec_lr: f64 = 2e-3;
    /// codec validation interval
    codec_eval_every: usize = 50usize;
    /// weight of the codec scale-consistency loss
    codec_consistency: f64 = 0.5;
    /// images per batch that get the scale-consistency loss
    codec_consistency_images: usize = 1usize;

    /// denoiser training iterations
    den_iterations: usize = 3000usize;
    /// denoiser batch size
    den_batch: usize = 32usize;
    /// denoiser learning rate
    den_lr: f64 = 2e-3;
    /// Min-SNR gamma
    gamma: f64 = 5.0;
    /// probability of replacing the prompt with the null prompt in training
    guidance_dropout: f64 = 0.1;
    /// global gradient-norm clip
    grad_clip: f64 = 1.0;
    /// classes withheld from denoiser training (comma-separated, may be empty)
    exclude_classes: String = "Pneumothorax";

    /// adapter rank
    lora_rank: usize = 4usize;
    /// adapter alpha; updates are scaled by alpha / rank
    lora_alpha: f64 = 4.0;
    /// adapter training iterations
    lora_iterations: usize = 1500usize;
    /// adapter learning rate
    lora_lr: f64 = 2e-3;
    /// adapter batch size
    lora_batch: usize = 32usize;
    /// classes the adapters are trained on (comma-separated); defaults to the held-out class
    lora_classes: String = "Pneumothorax";

    /// prompts as label sets: sets separated by `;`, labels by `,`
    prompt_labels: String = "Cardiomegaly";
    /// images per prompt
    n: usize = 8usize;
    /// sampling steps
    steps: usize = 50usize;
    /// classifier-free guidance scale
    guidance: f64 = 5.0;
    /// samples denoised per batch
    sample_batch: usize = 64usize;
    /// canvas side in pixels for tiled sampling (0 = trained size)
    canvas: usize = 0usize;
    /// tile stride in latent cells (0 = half a tile)
    stride: usize = 0usize;

    /// upscaling stages, each doubling the side
    stages: usize = 1usize;
    /// fraction of the schedule the upsampled latent is re-noised to
    tau_start: f64 = 0.6;
    /// skip-residual cosine decay exponent
    kappa: f64 = 1.0;
    /// denoising steps per upscaling stage
    upscale_steps: usize = 30usize;
    /// weight of the tiled proposal against the dilated one
    tiled_weight: f64 = 0.5;
    /// latent upsampling: bilinear or nearest
    upsample_mode: String = "bilinear";

    /// synthetic images per class for evaluation
    eval_n: usize = 100usize;
    /// iterations of the feature-extractor classifier
    eval_classifier_iterations: usize = 800usize;
    /// also score the base denoiser without adapters
    eval_compare_base: bool = true;

    /// real training images per class in the bench
    bench_real_per_class: usize = 20usize;
    /// synthetic images per class added in the augmented arm
    bench_synth_per_class: usize = 200usize;
    /// comma-separated bench seeds
    bench_seeds: String = "0,1,2";
    /// test images per class in each bench test set
    bench_test_per_class: usize = 50usize;
    /// bench classifier iterations
    bench_classifier_iterations: usize = 800usize;
    /// sampling steps for bench synthesis
    bench_steps: usize = 30usize;
}

/// Keys that change where or how fast a run happens but not what it computes.
const OPERATIONAL: [&str; 3] = ["log-level", "out", "workers"];

fn parse_classes(s: &str) -> Result<Vec<FindingLabel>, String> {
    s.split(',').map(str::trim).filter(|c| !c.is_empty()).map(|c| FindingLabel::from_name(c).map_err(|e| e.to_string())).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',').map(str::trim).map(|v| v.parse().map_err(|e| format!("`{v}`: {e}"))).collect()
}

impl RunConfig {
    /// Defaults, then the `--config` file, then `--key value` flags. All
    /// problems are collected before failing.
    pub fn resolve(args: &[String]) -> Result<Self, ConfigError> {
        let mut errors = Vec::new();
        let mut file = None;
        let mut flags = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(body) = arg.strip_prefix("--") else {
                errors.push(format!("unexpected argument `{arg}` (expected --key value)"));
                i += 1;
                continue;
            };
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), Some(v.to_string())),
                None => {
                    let v = args.get(i + 1).filter(|v| !v.starts_with("--")).cloned();
                    if v.is_some() {
                        i += 1;
                    }
                    (body.to_string(), v)
                }
            };
            i += 1;
            match (key.as_str(), value) {
                (_, None) => errors.push(format!("--{key}: missing value")),
                ("config", Some(v)) => file = Some(PathBuf::from(v)),
                (_, Some(v)) => flags.push((key, v, "command line".to_string())),
            }
        }

        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
            let mut from_file = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => from_file.push((k.trim().to_string(), v.trim().to_string(), format!("{}:{}", path.display(), n + 1))),
                    None => errors.push(format!("{}:{}: expected `key = value`", path.display(), n + 1)),
                }
            }
            flags.splice(0..0, from_file);
        }
        for (key, value, origin) in flags {
            match cfg.set(&key, &value) {
                Ok(true) => {}
                Ok(false) => errors.push(format!("unknown key `{key}` ({origin})")),
                Err(e) => errors.push(format!("bad value for `{key}` ({origin}): {e}")),
            }
        }
        errors.extend(cfg.validate());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Checks of values that parse but may not make sense.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let mut check = |key: &str, r: Result<(), String>| {
            if let Err(e) = r {
                errors.push(format!("bad value for `{key}`: {e}"));
            }
        };
        check("classes", self.class_list().map(|_| ()));
        check("exclude-classes", parse_classes(&self.exclude_classes).map(|_| ()));
        check("lora-classes", self.lora_class_list().map(|_| ()));
        check("split", self.split_fractions().map(|_| ()));
        check("prompt-labels", self.prompt_sets().map(|_| ()));
        check("bench-seeds", parse_list::<u64>(&self.bench_seeds).map(|_| ()));
        check("upsample-mode", self.upsample().map(|_| ()));
        check("log-level", self.log_level.parse::<log::LevelFilter>().map(|_| ()).map_err(|e| e.to_string()));
        if ![32, 64, 128].contains(&self.image_size) {
            check("image-size", Err(format!("{} is not one of 32, 64, 128", self.image_size)));
        }
        if self.canvas != 0 && (self.canvas < self.image_size || self.canvas % self.codec_factor != 0) {
            check("canvas", Err(format!("{} must be 0 or a multiple of {} no smaller than image-size", self.canvas, self.codec_factor)));
        }
        errors
    }

    pub fn class_list(&self) -> Result<Vec<FindingLabel>, String> {
        let c = parse_classes(&self.classes)?;
        if c.is_empty() {
            return Err("no classes given".into());
        }
        Ok(c)
    }

    pub fn excluded_classes(&self) -> Vec<FindingLabel> {
        parse_classes(&self.exclude_classes).unwrap_or_default()
    }

    pub fn lora_class_list(&self) -> Result<Vec<FindingLabel>, String> {
        let c = parse_classes(&self.lora_classes)?;
        if c.is_empty() {
            return Err("no classes given".into());
        }
        Ok(c)
    }

    pub fn split_fractions(&self) -> Result<[f64; 3], String> {
        let v: Vec<f64> = parse_list(&self.split)?;
        let arr: [f64; 3] = v.try_into().map_err(|_| "expected three fractions".to_string())?;
        if arr.iter().any(|f| !(*f > 0.0)) || (arr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("fractions must be positive and sum to 1".into());
        }
        Ok(arr)
    }

    pub fn prompt_sets(&self) -> Result<Vec<LabelVector>, String> {
        let sets: Vec<LabelVector> = self
            .prompt_labels
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| LabelVector::from_labels(&parse_classes(s)?).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        if sets.is_empty() {
            return Err("no prompts given".into());
        }
        Ok(sets)
    }

    pub fn bench_seed_list(&self) -> Vec<u64> {
        parse_list(&self.bench_seeds).unwrap_or_default()
    }

    pub fn upsample(&self) -> Result<UpsampleMode, String> {
        match self.upsample_mode.as_str() {
            "bilinear" => Ok(UpsampleMode::Bilinear),
            "nearest" => Ok(UpsampleMode::Nearest),
            other => Err(format!("`{other}` is not bilinear or nearest")),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    fn path_or(&self, value: &str, default: &[&str]) -> PathBuf {
        if value.is_empty() {
            default.iter().fold(self.out_dir(), |p, c| p.join(c))
        } else {
            PathBuf::from(value)
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.path_or(&self.data_dir, &["data"])
    }

    pub fn codec_path(&self) -> PathBuf {
        self.path_or(&self.codec, &["codec", "codec.ckpt"])
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.path_or(&self.denoiser, &["denoiser", "denoiser.ckpt"])
    }

    pub fn adapters_path(&self) -> PathBuf {
        self.path_or(&self.adapters, &["lora", "adapters.ckpt"])
    }

    pub fn samples_path(&self) -> PathBuf {
        self.path_or(&self.samples_dir, &["generate"])
    }

    /// `key = value` lines, sorted.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the sorted entries, leaving out keys that only affect
    /// where or how fast a run happens.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !OPERATIONAL.contains(&k.as_str()) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Help text listing every key with its default.
    pub fn key_help() -> String {
        let defaults: std::collections::BTreeMap<String, String> = Self::default().entries().into_iter().collect();
        let mut s = String::from("Configuration keys (--key value, or key = value in a --config file):\n");
        for (k, doc) in Self::keys() {
            s.push_str(&format!("  --{k:<28} {doc} [default: {}]\n", defaults[&k]));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn flags_override_defaults() {
        let c = RunConfig::resolve(&args(&["--seed", "7", "--den-lr=0.01", "--use-lora", "false"])).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.den_lr, 0.01);
        assert!(!c.use_lora);
        assert_eq!(c.n, 8);
    }

    #[test]
    fn every_bad_key_is_reported() {
        let err = RunConfig::resolve(&args(&["--bogus", "1", "--steps", "x", "--also-bogus", "2", "--split", "1,2"])).unwrap_err();
        let msg = err.to_string();
        for needle in ["bogus", "also-bogus", "steps", "split"] {
            assert!(msg.contains(needle), "{msg}");
        }
    }

    #[test]
    fn text_round_trips_through_a_file() {
        let mut c = RunConfig::default();
        c.set("prompt-labels", "Edema;Cardiomegaly,Edema").unwrap();
        c.set("tau-start", "0.45").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, c.to_text()).unwrap();
        let back = RunConfig::resolve(&args(&["--config", path.to_str().unwrap()])).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.prompt_sets().unwrap().len(), 2);
    }

    #[test]
    fn hash_ignores_operational_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.workers = 4;
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn paths_default_under_out() {
        let mut c = RunConfig::default();
        c.out = "o".into();
        assert_eq!(c.codec_path(), Path::new("o/codec/codec.ckpt"));
        c.codec = "x.ckpt".into();
        assert_eq!(c.codec_path(), Path::new("x.ckpt"));
    }
}
