//! Flat `key = value` configuration with dotted section keys.
//!
//! ```text
//! # comment
//! lr_main = 0.0001
//! backbone.channels = 16,32,64,64
//! text.template = "a remote sensing image pair"
//! ```
//!
//! Unknown keys are rejected. String values may be bare or JSON-quoted; the
//! serializer always quotes them.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;

use crate::bev::BevMode;
use crate::dataio::SplitName;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::textcond::ConditioningMode;

/// Environment variable overriding `text.http.url`.
pub const TEXT_URL_ENV: &str = "SEGCHANGE_TEXT_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Stub,
    Http,
}

impl ProviderKind {
    fn as_str(&self) -> &'static str {
        match self {
            ProviderKind::Stub => "stub",
            ProviderKind::Http => "http",
        }
    }
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(ProviderKind::Stub),
            "http" => Ok(ProviderKind::Http),
            other => Err(Error::Config(format!(
                "unknown text.provider `{other}` (expected stub or http)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: String,
    pub train_split: SplitName,
    /// `None` evaluates on the training split each epoch.
    pub val_split: Option<SplitName>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub name: String,
    pub channels: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub mode: ConditioningMode,
    pub template: String,
    pub max_len: usize,
    pub provider: ProviderKind,
    pub http_url: String,
    pub seed: u64,
    /// Text row width; defaults to `fuse.fpn_channels`.
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevConfig {
    pub mode: BevMode,
    pub attn_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseConfig {
    pub diff_channels: usize,
    pub fpn_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sched_step: usize,
    pub sched_gamma: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub precision: Precision,
    pub out_dir: String,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub bev: BevConfig,
    pub fuse: FuseConfig,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            epochs: 128,
            batch_size: 16,
            sched_step: 20,
            sched_gamma: 0.1,
            seed: 0,
            max_steps: 0,
            precision: Precision::F32,
            out_dir: "runs".into(),
            data: DataConfig {
                root: String::new(),
                train_split: SplitName::Train,
                val_split: Some(SplitName::Val),
            },
            backbone: BackboneConfig {
                name: "tiny".into(),
                channels: [16, 32, 64, 64],
            },
            text: TextConfig {
                mode: ConditioningMode::Dynamic,
                template: "a remote sensing image pair showing building changes".into(),
                max_len: 8,
                provider: ProviderKind::Stub,
                http_url: String::new(),
                seed: 0,
                dim: None,
            },
            bev: BevConfig {
                mode: BevMode::AdditiveLinear,
                attn_dim: 16,
                seed: 0,
            },
            fuse: FuseConfig {
                diff_channels: 64,
                fpn_channels: 64,
            },
            decoder: DecoderConfig {
                num_queries: 8,
                layers: 2,
                threshold: 0.5,
            },
        }
    }
}

const KEYS: &[&str] = &[
    "lr_main",
    "lr_backbone",
    "weight_decay",
    "epochs",
    "batch_size",
    "sched_step",
    "sched_gamma",
    "seed",
    "max_steps",
    "precision",
    "out_dir",
    "data.root",
    "data.train_split",
    "data.val_split",
    "backbone.name",
    "backbone.channels",
    "text.mode",
    "text.template",
    "text.max_len",
    "text.provider",
    "text.http.url",
    "text.seed",
    "text.dim",
    "bev.mode",
    "bev.attn_dim",
    "bev.seed",
    "fuse.diff_channels",
    "fuse.fpn_channels",
    "decoder.num_queries",
    "decoder.layers",
    "decoder.threshold",
];

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{raw}`: {e}")))
}

fn parse_string(key: &str, raw: &str) -> Result<String> {
    if raw.starts_with('"') {
        serde_json::from_str(raw).map_err(|e| Error::Config(format!("{key}: bad quoted string: {e}")))
    } else {
        Ok(raw.to_string())
    }
}

fn parse_channels(raw: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| parse_value("backbone.channels", p.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|p: Vec<usize>| {
        Error::Config(format!("backbone.channels needs 4 widths, got {}", p.len()))
    })
}

impl TrainConfig {
    /// Desk-scale preset for synthetic data.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::parse(&text)
    }

    /// Applies one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr_main" => self.lr_main = parse_value(key, v)?,
            "lr_backbone" => self.lr_backbone = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "sched_step" => self.sched_step = parse_value(key, v)?,
            "sched_gamma" => self.sched_gamma = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "max_steps" => self.max_steps = parse_value(key, v)?,
            "precision" => self.precision = parse_string(key, v)?.parse()?,
            "out_dir" => self.out_dir = parse_string(key, v)?,
            "data.root" => self.data.root = parse_string(key, v)?,
            "data.train_split" => self.data.train_split = parse_string(key, v)?.parse()?,
            "data.val_split" => {
                let s = parse_string(key, v)?;
                self.data.val_split = if s == "none" { None } else { Some(s.parse()?) };
            }
            "backbone.name" => self.backbone.name = parse_string(key, v)?,
            "backbone.channels" => self.backbone.channels = parse_channels(v)?,
            "text.mode" => self.text.mode = parse_string(key, v)?.parse()?,
            "text.template" => self.text.template = parse_string(key, v)?,
            "text.max_len" => self.text.max_len = parse_value(key, v)?,
            "text.provider" => self.text.provider = parse_string(key, v)?.parse()?,
            "text.http.url" => self.text.http_url = parse_string(key, v)?,
            "text.seed" => self.text.seed = parse_value(key, v)?,
            "text.dim" => {
                self.text.dim = if v == "auto" { None } else { Some(parse_value(key, v)?) }
            }
            "bev.mode" => self.bev.mode = parse_string(key, v)?.parse()?,
            "bev.attn_dim" => self.bev.attn_dim = parse_value(key, v)?,
            "bev.seed" => self.bev.seed = parse_value(key, v)?,
            "fuse.diff_channels" => self.fuse.diff_channels = parse_value(key, v)?,
            "fuse.fpn_channels" => self.fuse.fpn_channels = parse_value(key, v)?,
            "decoder.num_queries" => self.decoder.num_queries = parse_value(key, v)?,
            "decoder.layers" => self.decoder.layers = parse_value(key, v)?,
            "decoder.threshold" => self.decoder.threshold = parse_value(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.lr_main) || !positive(self.lr_backbone) {
            return fail("learning rates must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !positive(self.sched_gamma) {
            return fail("sched_gamma must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.sched_step == 0 {
            return fail("epochs, batch_size and sched_step must be at least 1");
        }
        if self.text.max_len == 0 {
            return fail("text.max_len must be at least 1");
        }
        if !(self.decoder.threshold > 0.0 && self.decoder.threshold < 1.0) {
            return fail("decoder.threshold must lie in (0, 1)");
        }
        if self.text.mode == ConditioningMode::Static && self.text.template.trim().is_empty() {
            return fail("text.mode=static requires a non-empty text.template");
        }
        Ok(())
    }

    /// Every key in canonical order; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("lr_main", format!("{:?}", self.lr_main));
        kv("lr_backbone", format!("{:?}", self.lr_backbone));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("sched_step", self.sched_step.to_string());
        kv("sched_gamma", format!("{:?}", self.sched_gamma));
        kv("seed", self.seed.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("precision", quote(self.precision.as_str()));
        kv("out_dir", quote(&self.out_dir));
        kv("data.root", quote(&self.data.root));
        kv("data.train_split", quote(self.data.train_split.as_str()));
        kv(
            "data.val_split",
            quote(self.data.val_split.map_or("none", |s| s.as_str())),
        );
        kv("backbone.name", quote(&self.backbone.name));
        let c = self.backbone.channels;
        kv("backbone.channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3]));
        kv("text.mode", quote(self.text.mode.as_str()));
        kv("text.template", quote(&self.text.template));
        kv("text.max_len", self.text.max_len.to_string());
        kv("text.provider", quote(self.text.provider.as_str()));
        kv("text.http.url", quote(&self.text.http_url));
        kv("text.seed", self.text.seed.to_string());
        kv("text.dim", self.text.dim.map_or("auto".into(), |d| d.to_string()));
        kv("bev.mode", quote(self.bev.mode.as_str()));
        kv("bev.attn_dim", self.bev.attn_dim.to_string());
        kv("bev.seed", self.bev.seed.to_string());
        kv("fuse.diff_channels", self.fuse.diff_channels.to_string());
        kv("fuse.fpn_channels", self.fuse.fpn_channels.to_string());
        kv("decoder.num_queries", self.decoder.num_queries.to_string());
        kv("decoder.layers", self.decoder.layers.to_string());
        kv("decoder.threshold", format!("{:?}", self.decoder.threshold));
        s
    }

    /// Applies `SEGCHANGE_TEXT_URL` if set.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(TEXT_URL_ENV) {
            self.text.http_url = url;
        }
    }

    pub fn text_dim(&self) -> usize {
        self.text.dim.unwrap_or(self.fuse.fpn_channels)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.name.clone(),
            backbone_channels: self.backbone.channels,
            bev_mode: self.bev.mode,
            bev_attn_dim: self.bev.attn_dim,
            bev_seed: self.bev.seed,
            diff_channels: self.fuse.diff_channels,
            fpn_channels: self.fuse.fpn_channels,
            num_queries: self.decoder.num_queries,
            decoder_layers: self.decoder.layers,
            refine_channels: ModelConfig::default().refine_channels,
            text_dim: match self.text.mode {
                ConditioningMode::None => None,
                _ => Some(self.text_dim()),
            },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::parse("lr_mian = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lr_mian"));
    }

    #[test]
    fn bare_strings_and_comments() {
        let cfg = TrainConfig::parse(
            "# desk run\nbev.mode = additive_exact\ntext.template = some words here\nbackbone.channels = 4, 8, 8, 16\n",
        )
        .unwrap();
        assert_eq!(cfg.bev.mode, BevMode::AdditiveExact);
        assert_eq!(cfg.text.template, "some words here");
        assert_eq!(cfg.backbone.channels, [4, 8, 8, 16]);
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(TrainConfig::parse("epochs = 0\n").is_err());
        assert!(TrainConfig::parse("lr_main = -1\n").is_err());
        assert!(TrainConfig::parse("decoder.threshold = 1.0\n").is_err());
        assert!(TrainConfig::parse("backbone.channels = 1,2,3\n").is_err());
        assert!(TrainConfig::parse("text.mode = llm\n").is_err());
    }
}
