//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vipa_core::decoder::KvSource;
use vipa_core::encoders::FusionMode;
use vipa_core::model::ModelConfig;
use vipa_core::optim::AdamWConfig;
use vipa_core::train::TrainConfig;
use vipa_core::Precision;

use crate::error::{Error, IoContext, Result};

pub const SEED_ENV: &str = "VIPA_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub mirror: bool,
    pub target_miou: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    /// Worker threads for per-sample gradients and evaluation; 1 is the
    /// deterministic single-threaded mode.
    pub threads: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = AdamWConfig::default();
        let train = TrainConfig::default();
        Self {
            model: ModelConfig::default(),
            lr: optim.lr,
            weight_decay: optim.weight_decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            clip_norm: train.clip_norm,
            mirror: train.mirror,
            target_miou: None,
            seed: 0,
            precision: Precision::F32,
            threads: 1,
            data: None,
            checkpoint: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "image_size",
    "base_channels",
    "dim",
    "heads",
    "mlp_ratio",
    "joint_dim",
    "decoder_dims",
    "fusion",
    "kv_source",
    "ratio",
    "tau_init",
    "contrastive_weight",
    "contrastive",
    "step1",
    "step2",
    "global_cue",
    "local_cue",
    "articles",
    "lr",
    "weight_decay",
    "epochs",
    "batch_size",
    "clip_norm",
    "mirror",
    "target_miou",
    "seed",
    "precision",
    "threads",
    "data",
    "checkpoint",
];

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got {value:?}")),
    }
}

fn optional(key: &str, value: &str) -> std::result::Result<Option<f64>, String> {
    match value {
        "none" | "off" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn show_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

pub fn parse_precision(value: &str) -> std::result::Result<Precision, String> {
    match value {
        "f32" | "32" => Ok(Precision::F32),
        "f64" | "64" => Ok(Precision::F64),
        v => Err(format!("precision: expected f32 or f64, got {v:?}")),
    }
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = num(key, value)?,
            "base_channels" => m.base_channels = num(key, value)?,
            "dim" => m.dim = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "joint_dim" => m.joint_dim = num(key, value)?,
            "decoder_dims" => {
                let dims: Vec<usize> = value.split(',').map(|d| num(key, d.trim())).collect::<std::result::Result<_, _>>()?;
                m.decoder_dims = dims.try_into().map_err(|_| "decoder_dims: expected three comma-separated values".to_string())?;
            }
            "fusion" => m.fusion = value.parse().map_err(|e: vipa_core::Error| e.to_string())?,
            "kv_source" => m.kv_source = value.parse().map_err(|e: vipa_core::Error| e.to_string())?,
            "ratio" => m.ratio = num(key, value)?,
            "tau_init" => m.tau_init = num(key, value)?,
            "contrastive_weight" => m.contrastive_weight = num(key, value)?,
            "contrastive" => m.contrastive = flag(key, value)?,
            "step1" => m.step1 = flag(key, value)?,
            "step2" => m.step2 = flag(key, value)?,
            "global_cue" => m.global_cue = flag(key, value)?,
            "local_cue" => m.local_cue = flag(key, value)?,
            "articles" => m.use_articles = flag(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "clip_norm" => self.clip_norm = optional(key, value)?,
            "mirror" => self.mirror = flag(key, value)?,
            "target_miou" => self.target_miou = optional(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = parse_precision(value)?,
            "threads" => self.threads = num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config { line: 0, message: m.to_string() });
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be a non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("clip_norm must be positive or none");
        }
        if self.target_miou.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return bad("target_miou must lie in [0, 1]");
        }
        if self.model.image_size % 32 != 0 {
            return bad("image_size must be a multiple of 32");
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|message| Error::Config { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    /// Reads `VIPA_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::usage(format!("{SEED_ENV}: cannot parse {v:?}")))?;
        }
        Ok(())
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("image_size", m.image_size.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("joint_dim", m.joint_dim.to_string());
        kv("decoder_dims", m.decoder_dims.map(|d| d.to_string()).join(","));
        kv("fusion", m.fusion.as_str().to_string());
        kv("kv_source", m.kv_source.as_str().to_string());
        kv("ratio", m.ratio.to_string());
        kv("tau_init", m.tau_init.to_string());
        kv("contrastive_weight", m.contrastive_weight.to_string());
        kv("contrastive", m.contrastive.to_string());
        kv("step1", m.step1.to_string());
        kv("step2", m.step2.to_string());
        kv("global_cue", m.global_cue.to_string());
        kv("local_cue", m.local_cue.to_string());
        kv("articles", m.use_articles.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("clip_norm", show_optional(self.clip_norm));
        kv("mirror", self.mirror.to_string());
        kv("target_miou", show_optional(self.target_miou));
        kv("seed", self.seed.to_string());
        kv("precision", precision_name(self.precision).to_string());
        kv("threads", self.threads.to_string());
        if let Some(p) = &self.data {
            kv("data", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            kv("checkpoint", p.display().to_string());
        }
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            clip_norm: self.clip_norm,
            seed: self.seed,
            target_miou: self.target_miou,
            mirror: self.mirror,
        }
    }

    /// Same architecture and weights layout.
    pub fn same_architecture(&self, other: &RunConfig) -> bool {
        let (a, b) = (&self.model, &other.model);
        (a.image_size, a.base_channels, a.dim, a.heads, a.mlp_ratio, a.joint_dim, a.decoder_dims, a.fusion, a.kv_source)
            == (b.image_size, b.base_channels, b.dim, b.heads, b.mlp_ratio, b.joint_dim, b.decoder_dims, b.fusion, b.kv_source)
    }
}

pub fn kv_sources() -> [KvSource; 3] {
    [KvSource::VanillaLinguistic, KvSource::AdvancedLinguistic, KvSource::VisualExpression]
}

pub fn fusion_modes() -> [FusionMode; 3] {
    [FusionMode::None, FusionMode::Late, FusionMode::Early]
}
