//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are
//! ignored. Every key must be consumed by a reader; leftovers are
//! reported as errors so typos never pass silently.

use crate::error::{Error, Result};
use crate::model::{Ensemble, Fusion, ModelConfig};
use crate::objectives::{LossConfig, MarginMode};
use crate::pipeline::ablation::{default_suite, AblationConfig};
use crate::pipeline::data::SyntheticDataConfig;
use crate::pipeline::evaluate::EvalOptions;
use crate::pipeline::sgd::Schedule;
use crate::pipeline::train::{Labeling, TrainConfig};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    consumed: bool,
}

#[derive(Debug, Clone)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(Error::ConfigLine {
                line,
                msg: "expected 'key = value'".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::ConfigLine {
                    line,
                    msg: "empty key".into(),
                });
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(Error::ConfigLine {
                    line,
                    msg: format!("key '{}' already set on line {}", key, prev.line),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
                consumed: false,
            });
        }
        Ok(KeyValues { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: format!("cannot read config: {}", e),
        })?;
        Self::parse(&text)
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let e = self.entries.iter_mut().find(|e| e.key == key && !e.consumed)?;
        e.consumed = true;
        Some((e.value.clone(), e.line))
    }

    pub fn opt_string(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|(v, _)| v)
    }

    pub fn opt<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| Error::ConfigLine {
                line,
                msg: format!("{} = {}: {}", key, v, e),
            }),
        }
    }

    pub fn or_default<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn opt_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((v, _)) if v.is_empty() => Ok(Some(Vec::new())),
            Some((v, line)) => v
                .split(',')
                .map(|part| {
                    let part = part.trim();
                    part.parse::<T>().map_err(|e| Error::ConfigLine {
                        line,
                        msg: format!("{} = {}: '{}': {}", key, v, part, e),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Parses a named value through a fallible constructor, attributing
    /// failures to the config line.
    pub fn opt_with<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => parse(&v).map(Some).map_err(|e| Error::ConfigLine {
                line,
                msg: format!("{} = {}: {}", key, v, e),
            }),
        }
    }

    /// Errors if any key was never consumed.
    pub fn finish(&self) -> Result<()> {
        let leftover: Vec<&Entry> = self.entries.iter().filter(|e| !e.consumed).collect();
        if let Some(first) = leftover.first() {
            let names: Vec<&str> = leftover.iter().map(|e| e.key.as_str()).collect();
            return Err(Error::ConfigLine {
                line: first.line,
                msg: format!("unknown key(s): {}", names.join(", ")),
            });
        }
        Ok(())
    }
}

pub fn data_config_from(kv: &mut KeyValues) -> Result<SyntheticDataConfig> {
    let d = SyntheticDataConfig::default();
    let cfg = SyntheticDataConfig {
        num_identities: kv.or_default("num_identities", d.num_identities)?,
        samples_per_identity: kv.or_default("samples_per_identity", d.samples_per_identity)?,
        eval_identities: kv.or_default("eval_identities", d.eval_identities)?,
        input_dim: kv.or_default("input_dim", d.input_dim)?,
        num_latent_groups: kv.or_default("num_latent_groups", d.num_latent_groups)?,
        within_identity_noise: kv.or_default("within_identity_noise", d.within_identity_noise)?,
        within_group_spread: kv.or_default("within_group_spread", d.within_group_spread)?,
        seed: kv.or_default("seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Model settings with the data-derived dimensions filled in.
pub fn model_config_from(
    kv: &mut KeyValues,
    input_dim: usize,
    num_identities: usize,
) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        input_dim,
        num_identities,
        backbone_layers: kv.opt_list("backbone_layers")?.unwrap_or(d.backbone_layers),
        shared_dim: kv.or_default("shared_dim", d.shared_dim)?,
        embed_dim: kv.or_default("embed_dim", d.embed_dim)?,
        num_groups: kv.or_default("num_groups", d.num_groups)?,
        decision_hidden_dim: kv.or_default("decision_hidden_dim", d.decision_hidden_dim)?,
        ensemble_mode: kv
            .opt_with("ensemble_mode", Ensemble::parse)?
            .unwrap_or(d.ensemble_mode),
        fusion_mode: kv.opt_with("fusion_mode", Fusion::parse)?.unwrap_or(d.fusion_mode),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn loss_config_from(kv: &mut KeyValues) -> Result<LossConfig> {
    let d = LossConfig::default();
    let margin_mode = kv
        .opt_with("margin_mode", MarginMode::parse)?
        .unwrap_or(d.margin_mode);
    let default_margin = match margin_mode {
        MarginMode::ArcFace => 0.5,
        MarginMode::CosFace => 0.35,
        MarginMode::Plain => 0.0,
    };
    let cfg = LossConfig {
        margin_mode,
        scale: kv.or_default("scale", d.scale)?,
        margin: kv.or_default("margin", default_margin)?,
        lambda: kv.or_default("lambda", d.lambda)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_schedule(s: &str) -> Result<Schedule> {
    let entries = s
        .split(',')
        .map(|pair| {
            let pair = pair.trim();
            let (step, rate) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected step:rate, got '{}'", pair)))?;
            let step = step
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("step '{}': {}", step.trim(), e)))?;
            let rate = rate
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("rate '{}': {}", rate.trim(), e)))?;
            Ok((step, rate))
        })
        .collect::<Result<Vec<_>>>()?;
    Schedule::new(entries)
}

pub fn train_config_from(kv: &mut KeyValues) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        phase1_steps: kv.or_default("phase1_steps", d.phase1_steps)?,
        phase2_steps: kv.or_default("phase2_steps", d.phase2_steps)?,
        batch_size: kv.or_default("batch_size", d.batch_size)?,
        schedule: kv.opt_with("lr_schedule", parse_schedule)?,
        momentum: kv.or_default("momentum", d.momentum)?,
        weight_decay: kv.or_default("weight_decay", d.weight_decay)?,
        seed: kv.or_default("seed", d.seed)?,
        expectation_window: kv.or_default("expectation_window", d.expectation_window)?,
        workers: kv.or_default("workers", d.workers)?,
        labeling: kv.opt_with("labeling", Labeling::parse)?.unwrap_or(d.labeling),
        disable_group_heads: kv.or_default("disable_group_heads", d.disable_group_heads)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Evaluation settings for suite files. The subsampling seed key is
/// `eval_seed`, since `seed` belongs to data generation there.
pub fn eval_options_from(kv: &mut KeyValues) -> Result<EvalOptions> {
    let d = EvalOptions::default();
    let mut similarity = d.similarity;
    similarity.beta = kv.or_default("beta", similarity.beta)?;
    similarity.gamma = kv.or_default("gamma", similarity.gamma)?;
    let opts = EvalOptions {
        far_levels: kv.opt_list("far_levels")?.unwrap_or(d.far_levels),
        use_group_similarity: kv.or_default("use_group_similarity", d.use_group_similarity)?,
        similarity,
        embedding_source: d.embedding_source,
        pair_cap: kv.or_default("pair_cap", d.pair_cap)?,
        seed: kv.or_default("eval_seed", d.seed)?,
    };
    opts.validate()?;
    Ok(opts)
}

/// Full ablation suite file: data keys (`seed` is the data seed), model,
/// loss, and training keys, plus `variants` and `seeds`.
pub fn ablation_config_from(kv: &mut KeyValues) -> Result<AblationConfig> {
    let data = data_config_from(kv)?;
    let model = model_config_from(kv, data.input_dim, data.train_identities())?;
    let losses = loss_config_from(kv)?;
    let train = train_config_from(kv)?;
    let eval = eval_options_from(kv)?;
    let variants = match kv.opt_string("variants") {
        None => default_suite(),
        Some(v) if v.trim().is_empty() => default_suite(),
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
    };
    let seeds = kv.opt_list("seeds")?.unwrap_or_else(|| vec![1, 2, 3]);
    let cfg = AblationConfig {
        data,
        model,
        losses,
        train,
        eval,
        variants,
        seeds,
    };
    cfg.validate()?;
    Ok(cfg)
}
