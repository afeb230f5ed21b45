//! Key-value run configuration.
//!
//! A config file holds `key = value` lines; `#` starts a comment. Every key
//! is checked against a fixed schema, and unknown keys are rejected with the
//! closest known key as a suggestion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregators::{self, AggConfig, AggKind};
use crate::data::{SbmSpec, SplitSizes};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Weighting};
use crate::trainer::{Optimizer, TrainConfig};

/// Every accepted key with its default value. `auto` defers to the model or
/// dataset.
pub const SCHEMA: &[(&str, &str)] = &[
    ("dataset", "sbm-std"),
    ("data_seed", "0"),
    ("split_seed", "0"),
    ("train_per_class", "20"),
    ("val_size", "auto"),
    ("test_size", "auto"),
    ("sbm_blocks", "4"),
    ("sbm_nodes_per_block", "100"),
    ("sbm_p_in", "0.05"),
    ("sbm_p_out", "0.005"),
    ("sbm_feature_dim", "16"),
    ("sbm_feature_shift", "1.0"),
    ("sbm_noise_sigma", "1.0"),
    ("model", "gcn"),
    ("hidden", "auto"),
    ("heads", "8"),
    ("dropout", "0.5"),
    ("weighting", "auto"),
    ("aggregator", "sum"),
    ("agg_theta_init", "auto"),
    ("agg_param", "auto"),
    ("agg_learnable", "true"),
    ("agg_share", "false"),
    ("lr", "0.01"),
    ("weight_decay", "5e-4"),
    ("max_epochs", "500"),
    ("patience", "100"),
    ("optimizer", "adam"),
    ("momentum", "0.9"),
    ("eval_every", "1"),
    ("seeds", "0"),
    ("out_dir", "runs"),
    ("export_embeddings", "false"),
];

/// Raw string values for every schema key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn suggestion(key: &str) -> String {
    let best = SCHEMA
        .iter()
        .map(|(k, _)| (strsim::damerau_levenshtein(key, k), *k))
        .min();
    match best {
        Some((d, k)) if d <= 3 => format!(" (did you mean {k:?}?)"),
        _ => String::new(),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}{}", suggestion(key)))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}:{}: {msg}", path.display(), i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    /// Every key in schema order, as a loadable config file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in SCHEMA {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// Validates and types every value.
    pub fn resolve(&self) -> Result<Resolved> {
        Resolved::from_config(self)
    }
}

fn typed<T: FromStr>(cfg: &RunConfig, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = cfg.get(key);
    raw.parse()
        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

fn auto_or<T: FromStr>(cfg: &RunConfig, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if cfg.get(key) == "auto" {
        Ok(None)
    } else {
        typed(cfg, key).map(Some)
    }
}

fn flag(cfg: &RunConfig, key: &str) -> Result<bool> {
    match cfg.get(key) {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key} = {other:?}: expected true or false"))),
    }
}

/// Parses `0,1,2` or a range `0..10`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let bad = |e: String| Error::Config(format!("seeds = {raw:?}: {e}"));
    let seeds: Vec<u64> = if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| bad(format!("{e}")))?;
        let b: u64 = b.trim().parse().map_err(|e| bad(format!("{e}")))?;
        (a..b).collect()
    } else {
        raw.split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|e| bad(format!("{e}"))))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad("no seeds".into()));
    }
    Ok(seeds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gcn,
    Gat,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Sbm { spec: SbmSpec, name: String },
    Dir(PathBuf),
}

/// A fully typed configuration.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub dataset: DatasetSource,
    pub data_seed: u64,
    pub split_seed: u64,
    pub train_per_class: usize,
    pub val_size: Option<usize>,
    pub test_size: Option<usize>,
    pub model: ModelKind,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub weighting: Weighting,
    pub agg: AggConfig,
    pub agg_share: bool,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub export_embeddings: bool,
}

impl Resolved {
    fn from_config(cfg: &RunConfig) -> Result<Self> {
        let dataset = match cfg.get("dataset") {
            name @ ("sbm-std" | "sbm") => {
                let spec = SbmSpec {
                    blocks: typed(cfg, "sbm_blocks")?,
                    nodes_per_block: typed(cfg, "sbm_nodes_per_block")?,
                    p_in: typed(cfg, "sbm_p_in")?,
                    p_out: typed(cfg, "sbm_p_out")?,
                    feature_dim: typed(cfg, "sbm_feature_dim")?,
                    feature_shift: typed(cfg, "sbm_feature_shift")?,
                    noise_sigma: typed(cfg, "sbm_noise_sigma")?,
                };
                spec.validate().map_err(|e| Error::Config(e.to_string()))?;
                DatasetSource::Sbm {
                    spec,
                    name: name.to_string(),
                }
            }
            "" => return Err(Error::Config("dataset must not be empty".into())),
            path => DatasetSource::Dir(PathBuf::from(path)),
        };
        let model = match cfg.get("model") {
            "gcn" => ModelKind::Gcn,
            "gat" => ModelKind::Gat,
            other => return Err(Error::Config(format!("model = {other:?}: expected gcn or gat"))),
        };
        let kind: AggKind = typed(cfg, "aggregator")?;
        let weighting = match auto_or::<Weighting>(cfg, "weighting")? {
            Some(w) => w,
            None if model == ModelKind::Gat => Weighting::Attention,
            None => Weighting::SymNorm,
        };
        if (model == ModelKind::Gat) != (weighting == Weighting::Attention) {
            return Err(Error::Config(format!(
                "weighting = {} does not fit model = {}",
                weighting.as_str(),
                model.as_str()
            )));
        }
        let mut agg = AggConfig::new(kind);
        agg.learnable = flag(cfg, "agg_learnable")? && kind.has_param();
        if let Some(theta) = auto_or::<f64>(cfg, "agg_theta_init")? {
            agg.theta = theta;
        }
        if let Some(value) = auto_or::<f64>(cfg, "agg_param")? {
            if !kind.has_param() {
                return Err(Error::Config(format!("agg_param set but {kind} has no parameter")));
            }
            agg.theta = aggregators::inverse_reparam(kind, value).map_err(|e| Error::Config(e.to_string()))?;
        }
        if kind.has_param() && !agg.learnable {
            agg.effective().map_err(|e| Error::Config(e.to_string()))?;
        }
        let train = TrainConfig {
            lr: typed(cfg, "lr")?,
            weight_decay: typed(cfg, "weight_decay")?,
            max_epochs: typed(cfg, "max_epochs")?,
            patience: typed(cfg, "patience")?,
            optimizer: typed::<Optimizer>(cfg, "optimizer")?,
            momentum: typed(cfg, "momentum")?,
            seed: 0,
            eval_every: typed(cfg, "eval_every")?,
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))?;
        let dropout: f64 = typed(cfg, "dropout")?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout = {dropout}: expected [0, 1)")));
        }
        let hidden = auto_or::<usize>(cfg, "hidden")?.unwrap_or(match model {
            ModelKind::Gcn => 16,
            ModelKind::Gat => 8,
        });
        let heads: usize = typed(cfg, "heads")?;
        if hidden == 0 || heads == 0 {
            return Err(Error::Config("hidden and heads must be positive".into()));
        }
        Ok(Resolved {
            dataset,
            data_seed: typed(cfg, "data_seed")?,
            split_seed: typed(cfg, "split_seed")?,
            train_per_class: typed(cfg, "train_per_class")?,
            val_size: auto_or(cfg, "val_size")?,
            test_size: auto_or(cfg, "test_size")?,
            model,
            hidden,
            heads,
            dropout,
            weighting,
            agg,
            agg_share: flag(cfg, "agg_share")?,
            train,
            seeds: parse_seeds(cfg.get("seeds"))?,
            out_dir: PathBuf::from(cfg.get("out_dir")),
            export_embeddings: flag(cfg, "export_embeddings")?,
        })
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DatasetSource::Sbm { name, .. } => name.clone(),
            DatasetSource::Dir(p) => p
                .file_name()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// `<dataset>-<model>-<aggregator>`.
    pub fn run_name(&self) -> String {
        format!("{}-{}-{}", self.dataset_name(), self.model.as_str(), self.agg.kind)
    }

    /// Split sizes, with `auto` resolved: 100/200 for block models, 500/1000
    /// otherwise.
    pub fn split_sizes(&self) -> SplitSizes {
        let (val, test) = match self.dataset {
            DatasetSource::Sbm { .. } => (100, 200),
            DatasetSource::Dir(_) => (500, 1000),
        };
        SplitSizes {
            per_class: self.train_per_class,
            val: self.val_size.unwrap_or(val),
            test: self.test_size.unwrap_or(test),
        }
    }

    pub fn model_spec(&self, in_dim: usize, classes: usize) -> ModelSpec {
        let mut spec = match self.model {
            ModelKind::Gcn => ModelSpec::gcn(in_dim, self.hidden, classes, self.agg, self.weighting, self.dropout),
            ModelKind::Gat => ModelSpec::gat(in_dim, self.hidden, self.heads, classes, self.agg, self.dropout),
        };
        spec.share_theta = self.agg_share;
        spec
    }
}
