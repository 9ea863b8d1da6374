//! Flat `section.key = value` run configuration.

use std::collections::BTreeSet;
use std::path::PathBuf;

use uad_core::data::{Split, SyntheticSpec};
use uad_core::evaluation::NormalitySettings;
use uad_core::model::{ArchConfig, ArchKind};
use uad_core::training::{Method, Schedule, TrainConfig};
use uad_core::{Result, UadError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: Option<DataSource>,
    pub root: PathBuf,
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    /// Training images held out for validation (standard datasets only).
    pub val_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub radii: Vec<f64>,
    pub disruption_steps: usize,
    pub disruption_samples: usize,
    pub normality_images: usize,
    pub normality: NormalitySettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub wall_time: bool,
}

/// Everything a run needs. Image geometry and class count of the model come
/// from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    /// Split scored by `eval`.
    pub eval_split: Split,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            seed: 0,
            data: DataConfig {
                source: None,
                root: PathBuf::from("data"),
                seed: 0,
                synthetic,
                val_size: 1000,
            },
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            eval_split: Split::Test,
            analysis: AnalysisConfig {
                radii: [0.0, 2.0, 4.0, 6.0, 8.0].iter().map(|r| r / 255.0).collect(),
                disruption_steps: 10,
                disruption_samples: 200,
                normality_images: 20,
                normality: NormalitySettings::default(),
            },
            output: OutputConfig {
                dir: None,
                wall_time: false,
            },
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> UadError {
    UadError::config(key, format!("cannot parse `{value}` as {expected}"))
}

/// A float, also accepting `a/b` fractions such as `8/255`.
pub fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v = match value.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad(key, value, "a number"))?;
            let b: f64 = b.trim().parse().map_err(|_| bad(key, value, "a number"))?;
            a / b
        }
        None => value.parse().map_err(|_| bad(key, value, "a number"))?,
    };
    if !v.is_finite() {
        return Err(bad(key, value, "a finite number"));
    }
    Ok(v)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value, "a non-negative integer"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| bad(key, value, "a non-negative integer"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = || parse_f64(key, v);
        let u = || parse_usize(key, v);
        let b = || parse_bool(key, v);
        let t = &mut self.train;
        let syn = &mut self.data.synthetic;
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "data.source" => {
                self.data.source = Some(match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar10" => DataSource::Cifar10,
                    _ => return Err(bad(key, v, "synthetic or cifar10")),
                })
            }
            "data.root" => self.data.root = PathBuf::from(v),
            "data.seed" => self.data.seed = parse_u64(key, v)?,
            "data.val_size" => self.data.val_size = u()?,
            "data.classes" => syn.classes = u()?,
            "data.image_size" => syn.image_size = u()?,
            "data.train_per_class" => syn.train_per_class = u()?,
            "data.val_per_class" => syn.val_per_class = u()?,
            "data.test_per_class" => syn.test_per_class = u()?,
            "data.noise" => syn.noise = f()?,
            "data.contrast" => syn.contrast = f()?,
            "data.texture" => syn.texture = f()?,
            "model.kind" => {
                self.model.kind = match v {
                    "convnet" => ArchKind::ConvNet,
                    "resnet18" => ArchKind::ResNet18,
                    _ => return Err(bad(key, v, "convnet or resnet18")),
                }
            }
            "model.widths" => self.model.widths = parse_list(key, v, parse_usize)?,
            "model.aum_depth" => self.model.aum_depth = u()?,
            "model.norm_eps" => self.model.norm_eps = f()?,
            "model.norm_momentum" => self.model.norm_momentum = f()?,
            "model.shared_affine" => self.model.shared_affine = b()?,
            "train.method" => {
                t.method = match v {
                    "uad_at" => Method::UadAt,
                    "trades" => Method::Trades,
                    "natural" => Method::Natural,
                    _ => return Err(bad(key, v, "uad_at, trades or natural")),
                }
            }
            "train.epochs" => t.epochs = v.parse().map_err(|_| bad(key, v, "a non-negative integer"))?,
            "train.batch_size" => t.batch_size = u()?,
            "train.lr_peak" => t.lr_peak = f()?,
            "train.momentum" => t.momentum = f()?,
            "train.weight_decay" => t.weight_decay = f()?,
            "train.schedule" => {
                t.schedule = match v {
                    "cyclic" => Schedule::Cyclic,
                    "linear" => Schedule::Linear,
                    _ => return Err(bad(key, v, "cyclic or linear")),
                }
            }
            "train.kappa_i" => t.kappa_i = u()?,
            "train.kappa_h" => t.kappa_h = u()?,
            "train.refine" => t.refine = b()?,
            "train.aum" => t.aum = b()?,
            "train.uncertainty" => t.uncertainty = b()?,
            "train.augment" => t.augment = b()?,
            "attack.epsilon" => t.attack.epsilon = f()?,
            "attack.step_size" => t.attack.step_size = f()?,
            "attack.steps" => t.attack.steps = u()?,
            "attack.refine_step" => t.attack.refine_step = f()?,
            "attack.refine_steps" => t.attack.refine_steps = u()?,
            "attack.init_noise_scale" => t.attack.init_noise_scale = f()?,
            "weights.beta" => t.weights.beta = f()?,
            "weights.lambda1" => t.weights.lambda1 = f()?,
            "weights.lambda2" => t.weights.lambda2 = f()?,
            "eval.epsilon" => t.eval.epsilon = f()?,
            "eval.step_size" => t.eval.step_size = f()?,
            "eval.steps" => t.eval.steps = u()?,
            "eval.restarts" => t.eval.restarts = u()?,
            "eval.batch_size" => t.eval.batch_size = u()?,
            "eval.split" => {
                self.eval_split = match v {
                    "val" => Split::Val,
                    "test" => Split::Test,
                    _ => return Err(bad(key, v, "val or test")),
                }
            }
            "analysis.radii" => self.analysis.radii = parse_list(key, v, parse_f64)?,
            "analysis.disruption_steps" => self.analysis.disruption_steps = u()?,
            "analysis.disruption_samples" => self.analysis.disruption_samples = u()?,
            "analysis.normality_images" => self.analysis.normality_images = u()?,
            "analysis.normality_adversaries" => self.analysis.normality.num_adversaries = u()?,
            "analysis.alpha" => self.analysis.normality.alpha = f()?,
            "output.dir" => self.output.dir = Some(PathBuf::from(v)),
            "output.wall_time" => self.output.wall_time = b()?,
            _ => return Err(UadError::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let syn = &self.data.synthetic;
        let mut out = vec![("seed", self.seed.to_string())];
        if let Some(src) = self.data.source {
            let name = match src {
                DataSource::Synthetic => "synthetic",
                DataSource::Cifar10 => "cifar10",
            };
            out.push(("data.source", name.to_string()));
        }
        out.extend([
            ("data.root", self.data.root.display().to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.val_size", self.data.val_size.to_string()),
            ("data.classes", syn.classes.to_string()),
            ("data.image_size", syn.image_size.to_string()),
            ("data.train_per_class", syn.train_per_class.to_string()),
            ("data.val_per_class", syn.val_per_class.to_string()),
            ("data.test_per_class", syn.test_per_class.to_string()),
            ("data.noise", syn.noise.to_string()),
            ("data.contrast", syn.contrast.to_string()),
            ("data.texture", syn.texture.to_string()),
            (
                "model.kind",
                match self.model.kind {
                    ArchKind::ConvNet => "convnet",
                    ArchKind::ResNet18 => "resnet18",
                }
                .to_string(),
            ),
            ("model.widths", join(&self.model.widths)),
            ("model.aum_depth", self.model.aum_depth.to_string()),
            ("model.norm_eps", self.model.norm_eps.to_string()),
            ("model.norm_momentum", self.model.norm_momentum.to_string()),
            ("model.shared_affine", self.model.shared_affine.to_string()),
            (
                "train.method",
                match t.method {
                    Method::UadAt => "uad_at",
                    Method::Trades => "trades",
                    Method::Natural => "natural",
                }
                .to_string(),
            ),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_peak", t.lr_peak.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            (
                "train.schedule",
                match t.schedule {
                    Schedule::Cyclic => "cyclic",
                    Schedule::Linear => "linear",
                }
                .to_string(),
            ),
            ("train.kappa_i", t.kappa_i.to_string()),
            ("train.kappa_h", t.kappa_h.to_string()),
            ("train.refine", t.refine.to_string()),
            ("train.aum", t.aum.to_string()),
            ("train.uncertainty", t.uncertainty.to_string()),
            ("train.augment", t.augment.to_string()),
            ("attack.epsilon", t.attack.epsilon.to_string()),
            ("attack.step_size", t.attack.step_size.to_string()),
            ("attack.steps", t.attack.steps.to_string()),
            ("attack.refine_step", t.attack.refine_step.to_string()),
            ("attack.refine_steps", t.attack.refine_steps.to_string()),
            ("attack.init_noise_scale", t.attack.init_noise_scale.to_string()),
            ("weights.beta", t.weights.beta.to_string()),
            ("weights.lambda1", t.weights.lambda1.to_string()),
            ("weights.lambda2", t.weights.lambda2.to_string()),
            ("eval.epsilon", t.eval.epsilon.to_string()),
            ("eval.step_size", t.eval.step_size.to_string()),
            ("eval.steps", t.eval.steps.to_string()),
            ("eval.restarts", t.eval.restarts.to_string()),
            ("eval.batch_size", t.eval.batch_size.to_string()),
            (
                "eval.split",
                match self.eval_split {
                    Split::Val => "val",
                    _ => "test",
                }
                .to_string(),
            ),
            ("analysis.radii", join(&self.analysis.radii)),
            ("analysis.disruption_steps", self.analysis.disruption_steps.to_string()),
            (
                "analysis.disruption_samples",
                self.analysis.disruption_samples.to_string(),
            ),
            ("analysis.normality_images", self.analysis.normality_images.to_string()),
            (
                "analysis.normality_adversaries",
                self.analysis.normality.num_adversaries.to_string(),
            ),
            ("analysis.alpha", self.analysis.normality.alpha.to_string()),
        ]);
        if let Some(dir) = &self.output.dir {
            out.push(("output.dir", dir.display().to_string()));
        }
        out.push(("output.wall_time", self.output.wall_time.to_string()));
        out
    }

    /// Parse config text over the defaults, then apply `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UadError::config(
                    format!("line {}", lineno + 1),
                    format!("expected `section.key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(UadError::config(key, format!("set twice (line {})", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| UadError::config("--override", format!("expected key=value, got `{o}`")))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    /// Resolved config text, which parses back to an identical config.
    pub fn to_text(&self) -> String {
        let mut s = format!("# resolved by uad {}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Architecture with geometry filled in from the dataset.
    pub fn arch(&self, in_channels: usize, image_size: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            in_channels,
            image_size,
            num_classes,
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn source(&self) -> Result<DataSource> {
        self.data
            .source
            .ok_or_else(|| UadError::config("data.source", "required field is missing"))
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.output
            .dir
            .clone()
            .ok_or_else(|| UadError::config("output.dir", "required field is missing"))
    }

    /// Field-level checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.source()?;
        self.output_dir()?;
        self.train_config().validate()?;
        if self.analysis.radii.is_empty() {
            return Err(UadError::config("analysis.radii", "need at least one radius"));
        }
        if !(0.0..1.0).contains(&self.analysis.normality.alpha) || self.analysis.normality.alpha == 0.0 {
            return Err(UadError::config("analysis.alpha", "must be in (0, 1)"));
        }
        if self.analysis.normality.num_adversaries < 3 {
            return Err(UadError::config("analysis.normality_adversaries", "must be >= 3"));
        }
        Ok(())
    }
}
