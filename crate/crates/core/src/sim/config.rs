use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AdaptationMask, ModelConfig};
use crate::trainer::{
    AlignmentSource, AugmentConfig, LabelMode, LossKind, OptimizerKind, TrainerConfig,
};

use super::data::DataConfig;

/// Everything that determines a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain_utterances: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_band: (usize, usize),
    pub rounds: usize,
    pub devices: usize,
    pub block_momentum: f64,
    pub labels: LabelMode,
    pub beam_size: usize,
    /// Local training setup shared by every device.
    pub trainer: TrainerConfig,
    pub eval_utterances: usize,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("device").expect("built-in preset")
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Parses `L,R`.
pub fn parse_band(value: &str) -> Result<(usize, usize)> {
    let (l, r) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("band `{value}` is not of the form L,R")))?;
    Ok((parse("band", l)?, parse("band", r)?))
}

fn parse_threshold(value: &str) -> Result<f64> {
    match value.trim() {
        "off" | "-inf" | "none" => Ok(f64::NEG_INFINITY),
        v => parse("filter_threshold", v),
    }
}

fn parse_mask(value: &str) -> Result<AdaptationMask> {
    let value = value.trim();
    AdaptationMask::preset(value).or_else(|_| {
        let names: Vec<&str> = value
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        AdaptationMask::from_names(&names)
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        v => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

fn fmt_f64(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "off".into()
    } else {
        format!("{x:?}")
    }
}

impl ExperimentConfig {
    /// Named configurations: `device` (clean target, augmentation on, no
    /// filtering) and `video` (noisy target, confidence filtering on).
    pub fn preset(name: &str) -> Result<Self> {
        let base = ExperimentConfig {
            seed: 42,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain_utterances: 2000,
            pretrain_steps: 4000,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            pretrain_band: (2, 5),
            rounds: 30,
            devices: 8,
            block_momentum: 0.8,
            labels: LabelMode::Pseudo,
            beam_size: 4,
            trainer: TrainerConfig {
                local_updates: 20,
                batch_size: 8,
                loss: LossKind::Sr,
                band: (2, 2),
                alignment_source: AlignmentSource::ViterbiOnline,
                filter_threshold: f64::NEG_INFINITY,
                augment: AugmentConfig::default(),
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-3,
                adam: Default::default(),
                mask: AdaptationMask::all(),
            },
            eval_utterances: 200,
            workers: 1,
        };
        match name {
            "device" => Ok(base),
            "video" => {
                let mut cfg = base;
                cfg.data.target_noise = 0.5;
                cfg.trainer.filter_threshold = -0.15;
                Ok(cfg)
            }
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Sets one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.trainer;
        match key {
            "preset" => {
                let seed = self.seed;
                *self = Self::preset(value.trim())?;
                self.seed = seed;
            }
            "seed" => self.seed = parse(key, value)?,
            "feat_dim" => self.model.feat_dim = parse(key, value)?,
            "hidden_dim" => self.model.hidden_dim = parse(key, value)?,
            "joint_dim" => self.model.joint_dim = parse(key, value)?,
            "vocab" => self.model.vocab = parse(key, value)?,
            "blank_id" => self.model.blank_id = parse(key, value)?,
            "d_min" => self.data.d_min = parse(key, value)?,
            "d_max" => self.data.d_max = parse(key, value)?,
            "u_min" => self.data.u_min = parse(key, value)?,
            "u_max" => self.data.u_max = parse(key, value)?,
            "source_noise" => self.data.source_noise = parse(key, value)?,
            "target_noise" => self.data.target_noise = parse(key, value)?,
            "perturbation" => self.data.perturbation = parse(key, value)?,
            "prior_shift" => self.data.prior_shift = parse(key, value)?,
            "pretrain_utterances" => self.pretrain_utterances = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_band" => self.pretrain_band = parse_band(value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "devices" => self.devices = parse(key, value)?,
            "block_momentum" => self.block_momentum = parse(key, value)?,
            "labels" => self.labels = value.trim().parse()?,
            "beam_size" => self.beam_size = parse(key, value)?,
            "eval_utterances" => self.eval_utterances = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "local_updates" => t.local_updates = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "loss" => t.loss = value.trim().parse()?,
            "band" => t.band = parse_band(value)?,
            "alignment_source" => t.alignment_source = value.trim().parse()?,
            "filter_threshold" => t.filter_threshold = parse_threshold(value)?,
            "optimizer" => t.optimizer = value.trim().parse()?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "mask" => t.mask = parse_mask(value)?,
            "augment" => {
                t.augment = if parse_bool(key, value)? {
                    AugmentConfig::default()
                } else {
                    AugmentConfig::off()
                }
            }
            "speed_rates" => {
                t.augment.speed_rates = value
                    .split(',')
                    .map(|r| parse(key, r))
                    .collect::<Result<_>>()?
            }
            "noise_sigma" => t.augment.noise_sigma = parse(key, value)?,
            "time_mask_max" => t.augment.time_mask_max = parse(key, value)?,
            "feat_mask_max" => t.augment.feat_mask_max = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a plain-text config: one `key = value` per line, `#` starts a
    /// comment. A `preset` line is applied before every other key.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = ExperimentConfig::default();
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "preset") {
            cfg = Self::preset(v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Every setting in the format [`ExperimentConfig::parse_text`] reads.
    pub fn to_text(&self) -> String {
        let t = &self.trainer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("feat_dim", self.model.feat_dim.to_string());
        kv("hidden_dim", self.model.hidden_dim.to_string());
        kv("joint_dim", self.model.joint_dim.to_string());
        kv("vocab", self.model.vocab.to_string());
        kv("blank_id", self.model.blank_id.to_string());
        kv("d_min", self.data.d_min.to_string());
        kv("d_max", self.data.d_max.to_string());
        kv("u_min", self.data.u_min.to_string());
        kv("u_max", self.data.u_max.to_string());
        kv("source_noise", fmt_f64(self.data.source_noise));
        kv("target_noise", fmt_f64(self.data.target_noise));
        kv("perturbation", fmt_f64(self.data.perturbation));
        kv("prior_shift", fmt_f64(self.data.prior_shift));
        kv("pretrain_utterances", self.pretrain_utterances.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("pretrain_lr", fmt_f64(self.pretrain_lr));
        kv(
            "pretrain_band",
            format!("{},{}", self.pretrain_band.0, self.pretrain_band.1),
        );
        kv("rounds", self.rounds.to_string());
        kv("devices", self.devices.to_string());
        kv("block_momentum", fmt_f64(self.block_momentum));
        kv(
            "labels",
            match self.labels {
                LabelMode::Pseudo => "pseudo".into(),
                LabelMode::True => "true".into(),
            },
        );
        kv("beam_size", self.beam_size.to_string());
        kv("eval_utterances", self.eval_utterances.to_string());
        kv("workers", self.workers.to_string());
        kv("local_updates", t.local_updates.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("loss", t.loss.name().into());
        kv("band", format!("{},{}", t.band.0, t.band.1));
        kv(
            "alignment_source",
            match t.alignment_source {
                AlignmentSource::ViterbiOnline => "viterbi_online".into(),
                AlignmentSource::BeamCached => "beam_cached".into(),
            },
        );
        kv("filter_threshold", fmt_f64(t.filter_threshold));
        kv(
            "optimizer",
            match t.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
        );
        kv("learning_rate", fmt_f64(t.learning_rate));
        kv("mask", t.mask.to_names().replace(' ', ","));
        kv(
            "speed_rates",
            t.augment
                .speed_rates
                .iter()
                .map(|r| fmt_f64(*r))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("noise_sigma", fmt_f64(t.augment.noise_sigma));
        kv("time_mask_max", t.augment.time_mask_max.to_string());
        kv("feat_mask_max", t.augment.feat_mask_max.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.trainer.validate()?;
        if self.rounds == 0 || self.devices == 0 {
            return Err(Error::Config(
                "rounds and devices must be at least 1".into(),
            ));
        }
        if self.pretrain_batch == 0 || self.pretrain_utterances == 0 {
            return Err(Error::Config(
                "pretraining needs data and a batch size".into(),
            ));
        }
        if self.eval_utterances == 0 {
            return Err(Error::Config("eval_utterances must be at least 1".into()));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.block_momentum >= 0.0 && self.block_momentum < 1.0) {
            return Err(Error::Config(format!(
                "block_momentum {} outside [0, 1)",
                self.block_momentum
            )));
        }
        Ok(())
    }
}
