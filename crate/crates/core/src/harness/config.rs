//! Training configuration: a flat `key = value` text format, every field
//! addressable by name, plus `--key value` style overrides.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_vsa::FeatureGrouping;
use crate::instance_vsa::AlignMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    TargetOnly,
    InstAdvVisga,
    InstAdvPc,
    InstAdvPcSff,
    InstConVisga,
    InstConPc,
    InstConPcSff,
    FeatAdvYocov1,
    FeatAdvPcKmeans,
    FeatAdvPtap,
}

/// Which loss terms a method adds on top of the supervised detector loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composition {
    /// Supervision comes from the target split (oracle run).
    pub supervise_target: bool,
    pub image_level: bool,
    pub instance: Option<(AlignMode, bool)>,
    pub feature: Option<FeatureKind>,
    pub pc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Hierarchical,
    KMeans,
    Ptap,
}

impl Composition {
    pub fn uses_target_images(&self) -> bool {
        self.image_level || self.instance.is_some() || self.feature.is_some() || self.pc
    }
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::SourceOnly,
        Method::TargetOnly,
        Method::InstAdvVisga,
        Method::InstAdvPc,
        Method::InstAdvPcSff,
        Method::InstConVisga,
        Method::InstConPc,
        Method::InstConPcSff,
        Method::FeatAdvYocov1,
        Method::FeatAdvPcKmeans,
        Method::FeatAdvPtap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::TargetOnly => "target_only",
            Method::InstAdvVisga => "inst_adv_visga",
            Method::InstAdvPc => "inst_adv_pc",
            Method::InstAdvPcSff => "inst_adv_pc_sff",
            Method::InstConVisga => "inst_con_visga",
            Method::InstConPc => "inst_con_pc",
            Method::InstConPcSff => "inst_con_pc_sff",
            Method::FeatAdvYocov1 => "feat_adv_yocov1",
            Method::FeatAdvPcKmeans => "feat_adv_pc_kmeans",
            Method::FeatAdvPtap => "feat_adv_ptap",
        }
    }

    pub fn composition(self) -> Composition {
        use AlignMode::{Adversarial, Contrastive};
        let uda = |instance, feature, pc| Composition {
            supervise_target: false,
            image_level: true,
            instance,
            feature,
            pc,
        };
        match self {
            Method::SourceOnly | Method::TargetOnly => Composition {
                supervise_target: self == Method::TargetOnly,
                image_level: false,
                instance: None,
                feature: None,
                pc: false,
            },
            Method::InstAdvVisga => uda(Some((Adversarial, false)), None, false),
            Method::InstAdvPc => uda(Some((Adversarial, false)), None, true),
            Method::InstAdvPcSff => uda(Some((Adversarial, true)), None, true),
            Method::InstConVisga => uda(Some((Contrastive, false)), None, false),
            Method::InstConPc => uda(Some((Contrastive, false)), None, true),
            Method::InstConPcSff => uda(Some((Contrastive, true)), None, true),
            Method::FeatAdvYocov1 => uda(None, Some(FeatureKind::Hierarchical), false),
            Method::FeatAdvPcKmeans => uda(None, Some(FeatureKind::KMeans), true),
            Method::FeatAdvPtap => uda(None, Some(FeatureKind::Ptap), false),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd or adam)"))),
        }
    }
}

impl OptimizerKind {
    fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_img: f64,
    pub lambda_inst: f64,
    pub lambda_pc: f64,
    pub grl_lambda: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub merge_threshold: f64,
    pub keep_fraction: f64,
    pub margin: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_instances: usize,
    pub pool_size: usize,
    pub attention_kernel: usize,
    pub contrastive_representatives: bool,
    pub pc_normalize: bool,
    pub kmeans_max_iter: usize,
    pub box_weight: f64,
    pub objectness_weight: f64,
    pub class_weight: f64,
    pub val_every: usize,
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::SourceOnly,
            epochs: 50,
            batch_size: 32,
            lambda_img: 1.0,
            lambda_inst: 1.0,
            lambda_pc: 1.0,
            grl_lambda: 1.0,
            optimizer: OptimizerKind::Sgd,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_steps: 20,
            grad_clip: 10.0,
            seed: 0,
            merge_threshold: 0.1,
            keep_fraction: 0.5,
            margin: 1.0,
            conf_threshold: 0.25,
            nms_iou: 0.7,
            max_instances: 64,
            pool_size: 3,
            attention_kernel: 3,
            contrastive_representatives: true,
            pc_normalize: false,
            kmeans_max_iter: 20,
            box_weight: 5.0,
            objectness_weight: 1.0,
            class_weight: 1.0,
            val_every: 0,
            max_steps: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

macro_rules! config_fields {
    ($($field:ident: $kind:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let key = key.replace('-', "_");
                match key.as_str() {
                    $(stringify!($field) => { self.$field = config_fields!(@parse $kind, &key, value)?; })*
                    other => return Err(Error::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            /// Canonical text form, one `key = value` line per field.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( writeln!(s, "{} = {}", stringify!($field), config_fields!(@show $kind, self.$field)).unwrap(); )*
                s
            }
        }
    };
    (@parse bool, $k:expr, $v:expr) => { parse_bool($k, $v) };
    (@parse method, $k:expr, $v:expr) => { $v.parse::<Method>() };
    (@parse optimizer, $k:expr, $v:expr) => { $v.parse::<OptimizerKind>() };
    (@parse num, $k:expr, $v:expr) => { parse($k, $v) };
    (@show method, $e:expr) => { $e.name() };
    (@show optimizer, $e:expr) => { $e.name() };
    (@show $other:ident, $e:expr) => { $e };
}

config_fields! {
    method: method,
    epochs: num,
    batch_size: num,
    lambda_img: num,
    lambda_inst: num,
    lambda_pc: num,
    grl_lambda: num,
    optimizer: optimizer,
    lr: num,
    momentum: num,
    weight_decay: num,
    warmup_steps: num,
    grad_clip: num,
    seed: num,
    merge_threshold: num,
    keep_fraction: num,
    margin: num,
    conf_threshold: num,
    nms_iou: num,
    max_instances: num,
    pool_size: num,
    attention_kernel: num,
    contrastive_representatives: bool,
    pc_normalize: bool,
    kmeans_max_iter: num,
    box_weight: num,
    objectness_weight: num,
    class_weight: num,
    val_every: num,
    max_steps: num,
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--key`, found `{flag}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => (
                    key,
                    it.next()
                        .ok_or_else(|| Error::Config(format!("missing value for `--{key}`")))?
                        .clone(),
                ),
            };
            self.set(key, &value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep_fraction must lie in (0, 1]");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if self.attention_kernel % 2 == 0 {
            return bad("attention_kernel must be odd");
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return bad("conf_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a hash of the canonical text form.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn feature_grouping(&self, class_count: usize) -> Option<FeatureGrouping> {
        self.method.composition().feature.map(|k| match k {
            FeatureKind::Hierarchical => FeatureGrouping::Hierarchical { groups: class_count + 1 },
            FeatureKind::KMeans => FeatureGrouping::KMeans {
                k: 2,
                max_iter: self.kmeans_max_iter,
            },
            FeatureKind::Ptap => FeatureGrouping::Ptap {
                keep_fraction: self.keep_fraction,
            },
        })
    }
}
