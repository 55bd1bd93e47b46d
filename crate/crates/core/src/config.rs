//! Experiment configuration: a plain-text file of `[section]` headers and
//! `key = value` lines that fully determines a run.
//!
//! ```text
//! seed = 0
//!
//! [backbone]
//! layout = desk
//!
//! [domain.sepia]
//! chain = hue_rotate(30) texture_overlay(noise, 0.2)
//! ```
//!
//! Keys before the first header belong to the root section. `#` starts a
//! comment. Unknown sections and keys are errors, so a typo cannot silently
//! fall back to a default. The full key reference lives in `docs/config.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::data::{parse_chain, AugmentPolicy, DomainSpec};
use crate::pipelines::{FinetuneConfig, Method, TrainConfig};
use crate::rerand::{validate_glob, Distribution, PolicyPreset, RerandPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("override `{0}` is not of the form section.key=value")]
    Override(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

fn value_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value { key: key.into(), msg: msg.into() }
}

/// Sections and their key/value pairs, before interpretation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: &str| ConfigError::Syntax { line: i + 1, msg: msg.into() };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
                    return Err(syntax("section names use letters, digits, `.`, `_` and `-`"));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(syntax("malformed key"));
            }
            if raw.sections.entry(section.clone()).or_default().insert(k.into(), v.trim().into()).is_some() {
                return Err(syntax(&format!("duplicate key `{k}`")));
            }
        }
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key=value`; a key without a dot targets the root
    /// section. Domain sections take the form `domain.<name>.chain=…`.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
        let path = path.trim();
        let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
        if key.is_empty() {
            return Err(ConfigError::Override(assignment.into()));
        }
        self.sections.entry(section.into()).or_default().insert(key.into(), value.trim().into());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Sorted, comment-free rendering. Equal configurations render
    /// identically regardless of formatting or key order in the source.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (name, keys) in &self.sections {
            if keys.is_empty() {
                continue;
            }
            if !name.is_empty() {
                let _ = writeln!(out, "[{name}]");
            }
            for (k, v) in keys {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// SHA-256 of [`RawConfig::canonical`], hex-encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn strip_comment(line: &str) -> &str {
    line.find('#').map_or(line, |i| &line[..i])
}

/// Interpreted configuration of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    /// Every domain the config can refer to: the built-in presets plus any
    /// `[domain.<name>]` sections.
    pub domains: BTreeMap<String, DomainSpec>,
    pub pretrain: TrainConfig,
    pub simclr: TrainConfig,
    pub rerand: RerandConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_per_class: usize,
    pub novel_per_class: usize,
    pub source: String,
    /// Domains rendered by `gen-data` for the novel classes.
    pub targets: Vec<String>,
    /// Domain evaluated by `eval`, `probe-stages` and the ablations.
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RerandConfig {
    pub preset: PolicyPreset,
    pub distribution: Distribution,
    pub reset_running_stats: bool,
}

impl RerandConfig {
    pub fn policy(&self, layout: &BackboneConfig, seed: u64) -> RerandPolicy {
        let mut p = self.preset.to_policy(layout, self.distribution, seed);
        p.reset_running_stats = self.reset_running_stats;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub method: Method,
    pub n: usize,
    pub k: usize,
    pub k_q: usize,
    pub tasks: usize,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblateConfig {
    pub presets: Vec<PolicyPreset>,
    pub distributions: Vec<Distribution>,
    /// Shot settings each ablation row is evaluated under.
    pub shots: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::default()).expect("defaults are valid")
    }
}

/// Reads typed values out of one section, remembering which keys were used.
struct Section<'a> {
    name: &'a str,
    keys: Option<&'a BTreeMap<String, String>>,
    used: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(raw: &'a RawConfig, name: &'a str) -> Self {
        Self { name, keys: raw.sections.get(name), used: Vec::new() }
    }

    fn full_key(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.push(key);
        self.keys.and_then(|m| m.get(key)).map(String::as_str)
    }

    fn get<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| value_err(&self.full_key(key), format!("cannot parse `{v}`: {e}"))),
        }
    }

    /// Comma-separated list.
    fn list<T: FromStr>(&mut self, key: &'static str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.items(key, default, ',')
    }

    fn items<T: FromStr>(&mut self, key: &'static str, default: Vec<T>, sep: char) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(sep)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| item.parse().map_err(|e| value_err(&self.full_key(key), format!("cannot parse `{item}`: {e}"))))
                .collect(),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(keys) = self.keys {
            if let Some(k) = keys.keys().find(|k| !self.used.contains(&k.as_str())) {
                return Err(ConfigError::UnknownKey(self.full_key(k)));
            }
        }
        Ok(())
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn layout_named(name: &str) -> Option<BackboneConfig> {
    match name {
        "desk" => Some(BackboneConfig::desk()),
        "resnet10" => Some(BackboneConfig::default()),
        _ => None,
    }
}

fn augment_named(name: &str) -> Option<AugmentPolicy> {
    match name {
        "none" => Some(AugmentPolicy::NONE),
        "crop_flip" => Some(AugmentPolicy::CROP_FLIP),
        "contrastive" => Some(AugmentPolicy::CONTRASTIVE),
        _ => None,
    }
}

fn train_section(raw: &RawConfig, name: &str, base: TrainConfig, seed: u64) -> Result<TrainConfig, ConfigError> {
    let mut s = Section::new(raw, name);
    let augment = match s.raw("augment") {
        None => base.augment,
        Some(a) => augment_named(a)
            .ok_or_else(|| value_err(&format!("{name}.augment"), "expected none, crop_flip or contrastive"))?,
    };
    let cfg = TrainConfig {
        epochs: s.get("epochs", base.epochs)?,
        batch_size: s.get("batch_size", base.batch_size)?,
        lr: s.get("lr", base.lr)?,
        momentum: s.get("momentum", base.momentum)?,
        weight_decay: s.get("weight_decay", base.weight_decay)?,
        decay_at: s.list("decay_at", base.decay_at.clone())?,
        decay_factor: s.get("decay_factor", base.decay_factor)?,
        temperature: s.get("temperature", base.temperature)?,
        proj_dim: s.get("proj_dim", base.proj_dim)?,
        augment,
        seed,
    };
    s.finish()?;
    cfg.validate().map_err(|e| value_err(name, e.to_string()))?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        const SECTIONS: [&str; 10] =
            ["", "backbone", "data", "pretrain", "simclr", "rerand", "finetune", "eval", "ablate", "domain"];
        for name in raw.sections.keys() {
            if !SECTIONS.contains(&name.as_str()) && !name.starts_with("domain.") {
                return Err(ConfigError::UnknownKey(format!("[{name}]")));
            }
        }

        let mut root = Section::new(raw, "");
        let seed = root.get("seed", 0u64)?;
        root.finish()?;

        let mut s = Section::new(raw, "backbone");
        let layout_name = s.get("layout", "desk".to_string())?;
        let mut backbone =
            layout_named(&layout_name).ok_or_else(|| value_err("backbone.layout", "expected desk or resnet10"))?;
        let blocks = s.list("blocks", backbone.blocks_per_stage.to_vec())?;
        backbone.blocks_per_stage =
            blocks.try_into().map_err(|_| value_err("backbone.blocks", "expected four block counts"))?;
        s.finish()?;
        backbone.validate().map_err(|e| value_err("backbone", e.to_string()))?;

        let mut domains: BTreeMap<String, DomainSpec> = ["source", "hue", "texture", "invert", "binarize"]
            .into_iter()
            .map(|n| (n.to_string(), DomainSpec::preset(n).expect("built-in domain")))
            .collect();
        for (name, _) in raw.sections.iter().filter(|(n, _)| n.starts_with("domain.")) {
            let dname = &name["domain.".len()..];
            let mut s = Section::new(raw, name);
            let chain = s.raw("chain").ok_or_else(|| value_err(name, "domain sections need a `chain`"))?;
            let transforms = parse_chain(chain).map_err(|e| value_err(&format!("{name}.chain"), e.to_string()))?;
            s.finish()?;
            domains.insert(dname.to_string(), DomainSpec::with(dname, transforms));
        }
        Section::new(raw, "domain").finish()?;

        let mut s = Section::new(raw, "data");
        let data = DataConfig {
            image_size: s.get("image_size", backbone.input_size)?,
            base_classes: s.get("base_classes", 20)?,
            novel_classes: s.get("novel_classes", 20)?,
            base_per_class: s.get("base_per_class", 50)?,
            novel_per_class: s.get("novel_per_class", 30)?,
            source: s.get("source", "source".to_string())?,
            targets: s.list("targets", vec!["texture".to_string(), "invert".into(), "binarize".into()])?,
            target: s.get("target", "binarize".to_string())?,
        };
        s.finish()?;
        if data.image_size != backbone.input_size {
            return Err(value_err("data.image_size", format!("the {layout_name} layout expects {}", backbone.input_size)));
        }
        for d in std::iter::once(&data.source).chain(&data.targets).chain([&data.target]) {
            if !domains.contains_key(d) {
                return Err(value_err("data", format!("unknown domain `{d}`")));
            }
        }

        let pretrain = train_section(raw, "pretrain", TrainConfig::supervised(), seed)?;
        let simclr = train_section(raw, "simclr", TrainConfig::simclr(), seed)?;

        let mut s = Section::new(raw, "rerand");
        let mut preset = s.get("preset", PolicyPreset::Topmost)?;
        if let Some(sel) = s.raw("selectors") {
            let globs: Vec<String> = split_list(sel).map(String::from).collect();
            for g in &globs {
                validate_glob(g).map_err(|e| value_err("rerand.selectors", e.to_string()))?;
            }
            preset = PolicyPreset::Custom(globs);
        }
        let rerand = RerandConfig {
            preset,
            distribution: s.get("distribution", Distribution::Uniform)?,
            reset_running_stats: s.get("reset_running_stats", true)?,
        };
        s.finish()?;

        let mut s = Section::new(raw, "finetune");
        let d = FinetuneConfig::default();
        let finetune = FinetuneConfig {
            steps: s.get("steps", d.steps)?,
            lr: s.get("lr", d.lr)?,
            momentum: s.get("momentum", d.momentum)?,
            weight_decay: s.get("weight_decay", d.weight_decay)?,
        };
        s.finish()?;
        finetune.validate().map_err(|e| value_err("finetune", e.to_string()))?;

        let mut s = Section::new(raw, "eval");
        let eval = EvalConfig {
            method: s.get("method", Method::Refine)?,
            n: s.get("n", 5)?,
            k: s.get("k", 5)?,
            k_q: s.get("k_q", crate::data::DEFAULT_QUERY)?,
            tasks: s.get("tasks", 600)?,
            workers: s.get("workers", 1)?,
        };
        s.finish()?;
        if eval.tasks == 0 || eval.n < 2 || eval.k == 0 || eval.k_q == 0 {
            return Err(value_err("eval", "needs tasks ≥ 1, n ≥ 2, k ≥ 1, k_q ≥ 1"));
        }

        let mut s = Section::new(raw, "ablate");
        let ablate = AblateConfig {
            // presets may contain commas themselves (`stages:1,4`)
            presets: s.items("presets", PolicyPreset::last_stage_layer_columns(), ' ')?,
            distributions: s.list("distributions", Distribution::ALL.to_vec())?,
            shots: s.list("shots", vec![1, 5])?,
        };
        s.finish()?;
        if ablate.shots.is_empty() || ablate.shots.contains(&0) {
            return Err(value_err("ablate.shots", "needs at least one positive shot count"));
        }

        Ok(Self { seed, backbone, data, domains, pretrain, simclr, rerand, finetune, eval, ablate })
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.get(name)
    }
}
