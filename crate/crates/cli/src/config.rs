//! `key = value` run configuration files.
//!
//! One pair per line; `#` starts a comment. Every key is optional and
//! unknown keys are rejected. Relative paths are resolved against the
//! directory holding the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cxhg::data::{SceneSpec, SplitRatio};
use cxhg::hourglass::HourglassConfig;
use cxhg::train::{LossWeights, TrainConfig};
use cxhg::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: HourglassConfig,
    pub train: TrainConfig,
    pub dataset_dir: Option<PathBuf>,
    pub split: SplitRatio,
    /// Seed of the train/validation split.
    pub split_seed: u64,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    pub scene: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: HourglassConfig::default(),
            train: TrainConfig::default(),
            dataset_dir: None,
            split: SplitRatio::default(),
            split_seed: 0,
            init_seed: 0,
            scene: SceneSpec::default(),
        }
    }
}

/// Keys in file order, with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("num_modules", "stacked hourglass modules"),
    ("depth", "pooling levels per module"),
    ("widths", "comma-separated feature widths, one per level"),
    ("stem_width", "channels after the input stem"),
    ("stem_stride", "stem downsampling factor (power of two)"),
    ("K", "codewords per encoding layer"),
    ("encoding_divisor", "resolution divisor where the encoding layers sit"),
    ("num_classes", "segmentation classes"),
    ("channels", "input channels"),
    ("patch", "square patch size"),
    ("base_lr", "initial learning rate"),
    ("power", "polynomial decay power"),
    ("epochs_phase1", "epochs without the encoding layers"),
    ("epochs_phase2", "epochs with the full model"),
    ("batch", "samples per optimizer step"),
    ("micro_batch", "samples per forward pass (gradient accumulation)"),
    ("se_weight", "weight of the class-presence loss"),
    ("augment", "random flips and rescaling (true/false)"),
    ("seed", "training seed (shuffles and augmentation)"),
    ("init_seed", "parameter initialization seed"),
    ("dataset_dir", "directory written by gen-data"),
    ("train_split", "training fraction as n/d"),
    ("split_seed", "seed of the train/validation split"),
    ("tile_width", "generated tile width"),
    ("tile_height", "generated tile height"),
    ("noise_sigma", "generated image noise"),
    ("rare_class_rate", "density multiplier of the rare class"),
];

fn bad(line: usize, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {key}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(line, key, format!("{value:?}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {content:?}")))?;
            cfg.set(line, key.trim(), value.trim(), base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, line: usize, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "num_modules" => m.num_modules = num(line, key, value)?,
            "depth" => m.depth = num(line, key, value)?,
            "widths" => {
                m.widths = value
                    .split(',')
                    .map(|w| num(line, key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "stem_width" => m.stem_width = num(line, key, value)?,
            "stem_stride" => m.stem_stride = num(line, key, value)?,
            "K" => m.codewords = num(line, key, value)?,
            "encoding_divisor" => m.encoding_resolution_divisor = num(line, key, value)?,
            "num_classes" => m.num_classes = num(line, key, value)?,
            "channels" => m.input_channels = num(line, key, value)?,
            "patch" => m.patch_size = num(line, key, value)?,
            "base_lr" => t.base_lr = num(line, key, value)?,
            "power" => t.power = num(line, key, value)?,
            "epochs_phase1" => t.epochs_phase1 = num(line, key, value)?,
            "epochs_phase2" => t.epochs_phase2 = num(line, key, value)?,
            "batch" => t.batch_size = num(line, key, value)?,
            "micro_batch" => t.micro_batch = Some(num(line, key, value)?),
            "se_weight" => {
                t.loss = LossWeights {
                    se_weight: num(line, key, value)?,
                }
            }
            "augment" => t.augment = num(line, key, value)?,
            "seed" => t.seed = num(line, key, value)?,
            "init_seed" => self.init_seed = num(line, key, value)?,
            "dataset_dir" => self.dataset_dir = Some(base_dir.join(value)),
            "train_split" => {
                let (n, d) = value
                    .split_once('/')
                    .ok_or_else(|| bad(line, key, format!("{value:?} is not n/d")))?;
                self.split = SplitRatio {
                    numerator: num(line, key, n.trim())?,
                    denominator: num(line, key, d.trim())?,
                };
            }
            "split_seed" => self.split_seed = num(line, key, value)?,
            "tile_width" => self.scene.width = num(line, key, value)?,
            "tile_height" => self.scene.height = num(line, key, value)?,
            "noise_sigma" => self.scene.noise_sigma = num(line, key, value)?,
            "rare_class_rate" => self.scene.rare_class_rate = num(line, key, value)?,
            _ => return Err(bad(line, key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch: must be positive".into()));
        }
        if t.micro_batch == Some(0) {
            return Err(Error::Config("micro_batch: must be positive".into()));
        }
        if !(t.base_lr > 0.0 && t.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr: {} must be positive", t.base_lr)));
        }
        if !(t.loss.se_weight >= 0.0 && t.loss.se_weight.is_finite()) {
            return Err(Error::Config(format!("se_weight: {} must be non-negative", t.loss.se_weight)));
        }
        self.split.sizes(10)?;
        Ok(())
    }

    /// Scene used by `gen-data` when driven by this config.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            channels: self.model.input_channels,
            ..self.scene.clone()
        }
    }

    /// The resolved configuration in file syntax.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let widths: Vec<String> = m.widths.iter().map(|w| w.to_string()).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("num_modules", m.num_modules.to_string());
        put("depth", m.depth.to_string());
        put("widths", widths.join(","));
        put("stem_width", m.stem_width.to_string());
        put("stem_stride", m.stem_stride.to_string());
        put("K", m.codewords.to_string());
        put("encoding_divisor", m.encoding_resolution_divisor.to_string());
        put("num_classes", m.num_classes.to_string());
        put("channels", m.input_channels.to_string());
        put("patch", m.patch_size.to_string());
        put("base_lr", t.base_lr.to_string());
        put("power", t.power.to_string());
        put("epochs_phase1", t.epochs_phase1.to_string());
        put("epochs_phase2", t.epochs_phase2.to_string());
        put("batch", t.batch_size.to_string());
        if let Some(mb) = t.micro_batch {
            put("micro_batch", mb.to_string());
        }
        put("se_weight", t.loss.se_weight.to_string());
        put("augment", t.augment.to_string());
        put("seed", t.seed.to_string());
        put("init_seed", self.init_seed.to_string());
        if let Some(d) = &self.dataset_dir {
            put("dataset_dir", d.display().to_string());
        }
        put("train_split", format!("{}/{}", self.split.numerator, self.split.denominator));
        put("split_seed", self.split_seed.to_string());
        put("tile_width", self.scene.width.to_string());
        put("tile_height", self.scene.height.to_string());
        put("noise_sigma", self.scene.noise_sigma.to_string());
        put("rare_class_rate", self.scene.rare_class_rate.to_string());
        out
    }
}
