//! Flat sectioned config: `[section]` headers, `key = value` lines, `#` or
//! `;` comments. Every key is optional; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eviseg::backbone::{BackboneConfig, Head, Objective, TrainConfig};
use eviseg::datagen::{Degradation, ShapeFamily, SyntheticSpec};
use eviseg::losses::LossConfig;
use eviseg::metrics::{default_ueo_thresholds, DEFAULT_ECE_BINS};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Seed offsets for the generated splits, so `seed` alone fixes every set.
pub const TRAIN_OFFSET: u64 = 100;
pub const TEST_OFFSET: u64 = 200;
pub const VAL_OFFSET: u64 = 300;
pub const OOD_OFFSET: u64 = 400;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub family: ShapeFamily,
    pub fg_min: f64,
    pub fg_max: f64,
    pub texture_noise: f64,
    pub texture_scale: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub previews: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataConfig {
            height: s.height,
            width: s.width,
            num_classes: s.num_classes,
            family: s.family,
            fg_min: s.fg_min,
            fg_max: s.fg_max,
            texture_noise: s.texture_noise,
            texture_scale: s.texture_scale,
            train: 200,
            val: 30,
            test: 40,
            previews: 4,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, family: ShapeFamily, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            family,
            fg_min: self.fg_min,
            fg_max: self.fg_max,
            texture_noise: self.texture_noise,
            texture_scale: self.texture_scale,
            seed,
        }
    }
}

/// Optional out-of-distribution split written next to the others.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodConfig {
    pub count: usize,
    pub family: ShapeFamily,
    pub degradation: Degradation,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig { count: 0, family: ShapeFamily::Rings, degradation: Degradation::GaussianBlur { sigma: 4.0, kernel: 13 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub base_width: usize,
    pub depth: usize,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        ModelConfig { base_width: b.base_width, depth: b.depth, head: Head::Evidential }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub degradations: Vec<Degradation>,
    pub ece_bins: usize,
    pub ueo_thresholds: Vec<f64>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            degradations: vec![
                Degradation::None,
                Degradation::GaussianNoise { sigma: 0.2 },
                Degradation::GaussianNoise { sigma: 0.4 },
            ],
            ece_bins: DEFAULT_ECE_BINS,
            ueo_thresholds: default_ueo_thresholds(),
            batch_size: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub ood: OodConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    /// Output root from `[paths] out`; not part of the hash.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            ood: OodConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            num_classes: self.data.num_classes,
            base_width: self.model.base_width,
            depth: self.model.depth,
            seed: self.seed,
        }
    }

    pub fn objective(&self) -> Objective {
        match self.model.head {
            Head::Evidential => Objective::Evidential(LossConfig { total_epochs: self.train.epochs, ..self.loss.clone() }),
            Head::Softmax => Objective::SoftmaxCe,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.train.epochs, batch_size: self.train.batch_size, lr: self.train.lr, seed: self.seed }
    }

    /// sha256 over the canonical JSON of every setting except the output root.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Cross-field checks, reported against the config file as a whole.
    pub fn validate(&self, origin: &str) -> Result<(), CliError> {
        let fail = |e: eviseg::Error| CliError::Config(format!("{origin}: {e}"));
        self.data.spec(self.data.family, 0).validate().map_err(fail)?;
        self.backbone().validate().map_err(fail)?;
        self.loss.validate().map_err(fail)?;
        let levels = 1usize << self.model.depth;
        if self.data.height % levels != 0 || self.data.width % levels != 0 {
            return Err(CliError::Config(format!(
                "{origin}: image size {}x{} must be divisible by 2^depth = {levels}",
                self.data.height, self.data.width
            )));
        }
        let positive = [
            ("train.epochs", self.train.epochs),
            ("train.batch_size", self.train.batch_size),
            ("data.train", self.data.train),
            ("data.val", self.data.val),
            ("data.test", self.data.test),
            ("eval.ece_bins", self.eval.ece_bins),
            ("eval.batch_size", self.eval.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("{origin}: {name} must be positive")));
            }
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(CliError::Config(format!("{origin}: train.lr must be positive, got {}", self.train.lr)));
        }
        if self.eval.degradations.is_empty() || self.eval.ueo_thresholds.is_empty() {
            return Err(CliError::Config(format!("{origin}: eval.degradations and eval.ueo_thresholds need an entry")));
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(origin: &str, line: usize, key: &str, raw: &str, what: &str) -> Result<T, CliError> {
    raw.parse()
        .map_err(|_| CliError::Config(format!("{origin}:{line}: {key}: expected {what}, got {raw:?}")))
}

fn parse_bool(origin: &str, line: usize, key: &str, raw: &str) -> Result<bool, CliError> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{origin}:{line}: {key}: expected true or false, got {raw:?}"))),
    }
}

fn parse_list<T: FromStr>(origin: &str, line: usize, key: &str, raw: &str, what: &str) -> Result<Vec<T>, CliError> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_value(origin, line, key, s, what)).collect()
}

/// Parses config text. `origin` names the source in diagnostics.
pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    let mut seen: Vec<(String, usize)> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split(['#', ';']).next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("{origin}:{line}: unterminated section header {content:?}")))?
                .trim();
            if !matches!(name, "run" | "data" | "ood" | "model" | "loss" | "train" | "eval" | "paths") {
                return Err(CliError::Config(format!("{origin}:{line}: unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{line}: expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if section.is_empty() {
            return Err(CliError::Config(format!("{origin}:{line}: `{key}` appears before any section")));
        }
        let full = format!("{section}.{key}");
        if let Some((_, first)) = seen.iter().find(|(k, _)| *k == full) {
            return Err(CliError::Config(format!("{origin}:{line}: {full} already set on line {first}")));
        }
        seen.push((full.clone(), line));
        let k = full.as_str();
        let num = "a number";
        let int = "a non-negative integer";
        match k {
            "run.seed" => cfg.seed = parse_value(origin, line, k, value, int)?,
            "data.height" => cfg.data.height = parse_value(origin, line, k, value, int)?,
            "data.width" => cfg.data.width = parse_value(origin, line, k, value, int)?,
            "data.num_classes" => cfg.data.num_classes = parse_value(origin, line, k, value, int)?,
            "data.family" => cfg.data.family = parse_value(origin, line, k, value, "blobs, rings or both")?,
            "data.fg_min" => cfg.data.fg_min = parse_value(origin, line, k, value, num)?,
            "data.fg_max" => cfg.data.fg_max = parse_value(origin, line, k, value, num)?,
            "data.texture_noise" => cfg.data.texture_noise = parse_value(origin, line, k, value, num)?,
            "data.texture_scale" => cfg.data.texture_scale = parse_value(origin, line, k, value, num)?,
            "data.train" => cfg.data.train = parse_value(origin, line, k, value, int)?,
            "data.val" => cfg.data.val = parse_value(origin, line, k, value, int)?,
            "data.test" => cfg.data.test = parse_value(origin, line, k, value, int)?,
            "data.previews" => cfg.data.previews = parse_value(origin, line, k, value, int)?,
            "ood.count" => cfg.ood.count = parse_value(origin, line, k, value, int)?,
            "ood.family" => cfg.ood.family = parse_value(origin, line, k, value, "blobs, rings or both")?,
            "ood.degradation" => cfg.ood.degradation = parse_value(origin, line, k, value, "a degradation")?,
            "model.base_width" => cfg.model.base_width = parse_value(origin, line, k, value, int)?,
            "model.depth" => cfg.model.depth = parse_value(origin, line, k, value, int)?,
            "model.head" => {
                cfg.model.head = match value {
                    "evidential" => Head::Evidential,
                    "softmax" => Head::Softmax,
                    _ => return Err(CliError::Config(format!("{origin}:{line}: {k}: expected evidential or softmax, got {value:?}"))),
                }
            }
            "loss.lambda_kl" => cfg.loss.lambda_kl = parse_value(origin, line, k, value, num)?,
            "loss.beta0" => cfg.loss.beta0 = parse_value(origin, line, k, value, num)?,
            "loss.dice_smooth" => cfg.loss.dice_smooth = parse_value(origin, line, k, value, num)?,
            "loss.anneal_dice" => cfg.loss.anneal_dice = parse_bool(origin, line, k, value)?,
            "loss.certainty_threshold" => cfg.loss.certainty_threshold = parse_value(origin, line, k, value, num)?,
            "loss.cup" => cfg.loss.cup_enabled = parse_bool(origin, line, k, value)?,
            "train.epochs" => cfg.train.epochs = parse_value(origin, line, k, value, int)?,
            "train.batch_size" => cfg.train.batch_size = parse_value(origin, line, k, value, int)?,
            "train.lr" => cfg.train.lr = parse_value(origin, line, k, value, num)?,
            "eval.degradations" => cfg.eval.degradations = parse_list(origin, line, k, value, "a degradation")?,
            "eval.ece_bins" => cfg.eval.ece_bins = parse_value(origin, line, k, value, int)?,
            "eval.ueo_thresholds" => cfg.eval.ueo_thresholds = parse_list(origin, line, k, value, num)?,
            "eval.batch_size" => cfg.eval.batch_size = parse_value(origin, line, k, value, int)?,
            "paths.out" => cfg.out = Some(PathBuf::from(value)),
            _ => return Err(CliError::Config(format!("{origin}:{line}: unknown key `{key}` in [{section}]"))),
        }
    }
    cfg.validate(origin)?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}
