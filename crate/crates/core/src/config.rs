//! Plain-text `key=value` configuration.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored.
//! Paired dataset paths use keys of the form `data.<a>-<b>` and are
//! resolved relative to the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::{BetaSpacing, NoiseSchedule};
use crate::system::{ModelConfig, System, DEFAULT_PAIRS};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
    base: PathBuf,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Self {
            entries,
            base: PathBuf::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        c.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|p| self.base.join(p))
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Dataset path for a pair under `data.a-b` or `data.b-a`.
    pub fn pair_path(&self, a: &str, b: &str) -> Option<PathBuf> {
        self.path(&format!("data.{a}-{b}"))
            .or_else(|| self.path(&format!("data.{b}-{a}")))
    }
}

/// Every tunable of a run, with defaults for missing keys.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub data_seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub model: ModelConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

const KNOWN: &[&str] = &[
    "seed",
    "data.seed",
    "data.train",
    "data.val",
    "out.dir",
    "model.embed_dim",
    "model.context_len",
    "model.channels",
    "model.heads",
    "model.time_dim",
    "model.context_heads",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "schedule.spacing",
    "train.batch",
    "train.align_steps",
    "train.pretrain_steps",
    "train.flow_steps",
    "train.lr_encoder",
    "train.lr_backbone",
    "train.lr_cross",
    "train.weight_decay_cross",
    "train.cfg_dropout",
    "train.lambda1",
    "train.vi_weight_align",
    "train.vi_in_flows",
    "train.vi_weight_flow",
    "train.learn_tau",
    "train.clean_partner_prob",
    "sampler.steps",
    "sampler.eta",
    "sampler.guidance_scale",
    "eval.pairs",
];

impl Settings {
    pub fn from_config(c: &Config) -> Result<Self> {
        for k in c.keys() {
            let pair_key = k
                .strip_prefix("data.")
                .is_some_and(|rest| rest.contains('-'));
            if !pair_key && !KNOWN.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let d = DenoiserConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SamplerConfig::default();
        let seed = c.get("seed", 0u64)?;
        let out = Self {
            seed,
            data_seed: c.get("data.seed", seed)?,
            train_count: c.get("data.train", 256)?,
            val_count: c.get("data.val", 64)?,
            model: ModelConfig {
                embed_dim: c.get("model.embed_dim", m.embed_dim)?,
                context_len: c.get("model.context_len", m.context_len)?,
                denoiser: DenoiserConfig {
                    channels: c.get("model.channels", d.channels)?,
                    heads: c.get("model.heads", d.heads)?,
                    time_dim: c.get("model.time_dim", d.time_dim)?,
                },
                context_heads: c.get("model.context_heads", m.context_heads)?,
            },
            schedule_steps: c.get("schedule.steps", 1000)?,
            beta_start: c.get("schedule.beta_start", 0.00085)?,
            beta_end: c.get("schedule.beta_end", 0.012)?,
            spacing: BetaSpacing::parse(c.raw("schedule.spacing").unwrap_or("linear"))?,
            train: TrainConfig {
                batch: c.get("train.batch", t.batch)?,
                align_steps: c.get("train.align_steps", t.align_steps)?,
                pretrain_steps: c.get("train.pretrain_steps", t.pretrain_steps)?,
                flow_steps: c.get("train.flow_steps", t.flow_steps)?,
                lr_encoder: c.get("train.lr_encoder", t.lr_encoder)?,
                lr_backbone: c.get("train.lr_backbone", t.lr_backbone)?,
                lr_cross: c.get("train.lr_cross", t.lr_cross)?,
                weight_decay_cross: c.get("train.weight_decay_cross", t.weight_decay_cross)?,
                cfg_dropout: c.get("train.cfg_dropout", t.cfg_dropout)?,
                lambda1: c.get("train.lambda1", t.lambda1)?,
                vi_weight_align: c.get("train.vi_weight_align", t.vi_weight_align)?,
                vi_in_flows: c.get("train.vi_in_flows", t.vi_in_flows)?,
                vi_weight_flow: c.get("train.vi_weight_flow", t.vi_weight_flow)?,
                learn_tau: c.get("train.learn_tau", t.learn_tau)?,
                clean_partner_prob: c.get("train.clean_partner_prob", t.clean_partner_prob)?,
            },
            sampler: SamplerConfig {
                steps: c.get("sampler.steps", s.steps)?,
                eta: c.get("sampler.eta", s.eta)?,
                guidance_scale: c.get("sampler.guidance_scale", s.guidance_scale)?,
                seed,
            },
        };
        out.sampler.validate()?;
        if out.train.batch < 2 {
            return Err(Error::Config("train.batch must be at least 2".into()));
        }
        Ok(out)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_spacing(self.schedule_steps, self.beta_start, self.beta_end, self.spacing)
    }

    /// A fresh, seeded system over the standard modalities and pairs.
    pub fn system(&self) -> Result<System> {
        let registry = crate::modality::Registry::standard(self.model.embed_dim, self.model.context_len);
        System::new(registry, self.model, self.schedule()?, &DEFAULT_PAIRS, self.seed)
    }
}
