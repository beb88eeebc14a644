//! Flat `key = value` configuration files.
//!
//! `#` starts a comment; blank lines are ignored; unknown keys are errors.
//! One file can hold both training and serving settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::catalog::SplitFractions;
use crate::error::{Error, Result};
use crate::models::{ChannelSpec, HierarchicalConfig, ModelConfig, ModelKind, StructuredMode};
use crate::train::TrainConfig;

/// Parses `key = value` lines. Later duplicates are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| value(key, x.trim())).collect()
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {v:?} for {key}"))),
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Capacity of each dictionary: the title channel, every other free-text
/// channel, and the joint structured-attribute dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictionarySizes {
    pub title: usize,
    pub description: usize,
    pub structured: usize,
}

impl Default for DictionarySizes {
    fn default() -> Self {
        DictionarySizes {
            title: 500_000,
            description: 1_000_000,
            structured: 100_000,
        }
    }
}

impl DictionarySizes {
    pub fn for_attribute(&self, attribute: &str) -> usize {
        if attribute == "product_name" {
            self.title
        } else {
            self.description
        }
    }
}

/// Everything a training run needs apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub dictionary_sizes: DictionarySizes,
    pub train: TrainConfig,
    pub hierarchical: HierarchicalConfig,
    pub split: SplitFractions,
    pub stratify_floor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ModelKind::Multicnn,
            model: ModelConfig::default(),
            dictionary_sizes: DictionarySizes::default(),
            train: TrainConfig::default(),
            hierarchical: HierarchicalConfig::default(),
            split: SplitFractions::default(),
            stratify_floor: 200,
        }
    }
}

/// Micro-batching service settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeSettings {
    pub poll_interval: Duration,
    pub max_batch: usize,
    pub k: usize,
    pub queue_capacity: usize,
    pub request_timeout: Duration,
    pub bind: String,
}

impl Default for ServeSettings {
    fn default() -> Self {
        ServeSettings {
            poll_interval: Duration::from_millis(300),
            max_batch: 1024,
            k: 3,
            queue_capacity: 8 * 1024,
            request_timeout: Duration::from_secs(10),
            bind: "127.0.0.1:8080".into(),
        }
    }
}

impl ServeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.poll_interval.is_zero() {
            return Err(Error::Config("poll_interval must be > 0".into()));
        }
        if self.max_batch == 0 || self.k == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("max_batch, k and queue_capacity must be >= 1".into()));
        }
        if self.request_timeout.is_zero() {
            return Err(Error::Config("request_timeout must be > 0".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "poll_interval" => self.poll_interval = seconds(key, v)?,
            "max_batch" => {
                self.max_batch = value(key, v)?;
                self.queue_capacity = self.queue_capacity.max(self.max_batch);
            }
            "k" => self.k = value(key, v)?,
            "queue_capacity" => self.queue_capacity = value(key, v)?,
            "request_timeout" => self.request_timeout = seconds(key, v)?,
            "bind" => self.bind = v.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies `PRODCAT_POLL_INTERVAL`, `PRODCAT_MAX_BATCH`,
    /// `PRODCAT_QUEUE_CAPACITY` and `PRODCAT_BIND` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for (var, key) in [
            ("PRODCAT_POLL_INTERVAL", "poll_interval"),
            ("PRODCAT_MAX_BATCH", "max_batch"),
            ("PRODCAT_QUEUE_CAPACITY", "queue_capacity"),
            ("PRODCAT_BIND", "bind"),
        ] {
            if let Some(v) = lookup(var) {
                self.set(key, v.trim())?;
            }
        }
        Ok(())
    }
}

fn seconds(key: &str, v: &str) -> Result<Duration> {
    let s: f64 = value(key, v)?;
    Duration::try_from_secs_f64(s).map_err(|_| Error::Config(format!("invalid duration {v:?} for {key}")))
}

/// A whole configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileConfig {
    pub run: RunConfig,
    pub serve: ServeSettings,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FileConfig::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.run.set(&k, &v)? && !cfg.serve.set(&k, &v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        cfg.run.validate()?;
        cfg.serve.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Multicnn => self.model.validate()?,
            ModelKind::Hierarchical => self.hierarchical.validate()?,
        }
        self.train.validate()?;
        self.split.validate()?;
        let d = self.dictionary_sizes;
        if [d.title, d.description, d.structured].iter().any(|&n| n < crate::text::RESERVED.len()) {
            return Err(Error::Config("dictionary sizes must cover the reserved tokens".into()));
        }
        Ok(())
    }

    fn channel_len(&mut self, attribute: &str, len: usize) {
        self.model.channels.retain(|c| c.attribute != attribute);
        if len > 0 {
            self.model.channels.push(ChannelSpec::new(attribute, len));
            self.model.channels.sort_by_key(|c| match c.attribute.as_str() {
                "product_name" => 0,
                _ => 1,
            });
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let m = &mut self.model;
        match key {
            "model" => {
                self.kind = match v {
                    "multicnn" => ModelKind::Multicnn,
                    "hierarchical" => ModelKind::Hierarchical,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for model"))),
                }
            }
            "title_len" => self.channel_len("product_name", value(key, v)?),
            "description_len" => self.channel_len("product_short_description", value(key, v)?),
            "structured" => m.structured.mode = value(key, v)?,
            "structured_len" => m.structured.max_len = value(key, v)?,
            "separator" => m.structured.with_separator = bool_value(key, v)?,
            "embed_dim" => m.conv.embed_dim = value(key, v)?,
            "filters" => m.conv.filters_per_width = value(key, v)?,
            "widths" => m.conv.widths = list(key, v)?,
            "fc" => m.fc_sizes = list(key, v)?,
            "title_dict_size" => self.dictionary_sizes.title = value(key, v)?,
            "description_dict_size" => self.dictionary_sizes.description = value(key, v)?,
            "structured_dict_size" => self.dictionary_sizes.structured = value(key, v)?,
            "epochs" => self.train.epochs = value(key, v)?,
            "batch_size" => self.train.batch_size = value(key, v)?,
            "base_lr" => self.train.base_lr = value(key, v)?,
            "min_lr" => self.train.min_lr = value(key, v)?,
            "momentum" => self.train.momentum = value(key, v)?,
            "dropout" => self.train.dropout = value(key, v)?,
            "seed" => self.set_seed(value(key, v)?),
            "stratify_floor" => self.stratify_floor = value(key, v)?,
            "train_fraction" => self.split.train = value(key, v)?,
            "validation_fraction" => self.split.validation = value(key, v)?,
            "test_fraction" => self.split.test = value(key, v)?,
            "hash_dim" => self.hierarchical.hash_dim = value(key, v)?,
            "l2" => self.hierarchical.l2 = value(key, v)?,
            "hierarchical_epochs" => self.hierarchical.epochs = value(key, v)?,
            "hierarchical_lr" => self.hierarchical.learning_rate = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// One seed drives every stochastic step of a run.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.hierarchical.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(FileConfig::parse(text)?.run)
    }

    /// Effective settings in the file format; parses back to `self`
    /// (class count aside, which comes from the data).
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let len_of = |attr: &str| {
            m.channels
                .iter()
                .find(|c| c.attribute == attr)
                .map_or(0, |c| c.max_len)
        };
        let kind = match self.kind {
            ModelKind::Multicnn => "multicnn",
            ModelKind::Hierarchical => "hierarchical",
        };
        let structured = match m.structured.mode {
            StructuredMode::None => "none",
            StructuredMode::WordAvg => "word_avg",
            StructuredMode::Conv => "conv",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model", kind.into());
        kv("title_len", len_of("product_name").to_string());
        kv("description_len", len_of("product_short_description").to_string());
        kv("structured", structured.into());
        kv("structured_len", m.structured.max_len.to_string());
        kv("separator", m.structured.with_separator.to_string());
        kv("embed_dim", m.conv.embed_dim.to_string());
        kv("filters", m.conv.filters_per_width.to_string());
        kv("widths", join(&m.conv.widths));
        kv("fc", join(&m.fc_sizes));
        kv("title_dict_size", self.dictionary_sizes.title.to_string());
        kv("description_dict_size", self.dictionary_sizes.description.to_string());
        kv("structured_dict_size", self.dictionary_sizes.structured.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("base_lr", self.train.base_lr.to_string());
        kv("min_lr", self.train.min_lr.to_string());
        kv("momentum", self.train.momentum.to_string());
        kv("dropout", self.train.dropout.to_string());
        kv("seed", self.train.seed.to_string());
        kv("stratify_floor", self.stratify_floor.to_string());
        kv("train_fraction", self.split.train.to_string());
        kv("validation_fraction", self.split.validation.to_string());
        kv("test_fraction", self.split.test.to_string());
        kv("hash_dim", self.hierarchical.hash_dim.to_string());
        kv("l2", self.hierarchical.l2.to_string());
        kv("hierarchical_epochs", self.hierarchical.epochs.to_string());
        kv("hierarchical_lr", self.hierarchical.learning_rate.to_string());
        s
    }
}
