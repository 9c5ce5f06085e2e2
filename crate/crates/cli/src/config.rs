//! Flat TOML run configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use asmil::attention::AttentionMap;
use asmil::data::DatasetFormat;
use asmil::model::{Architecture, ModelConfig, OnlineAttention};
use asmil::trainer::{AnchorStrategy, ScheduleGranularity, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub format: String,
    pub out_dir: PathBuf,

    pub architecture: String,
    pub hidden_dim: usize,
    pub n_tokens: usize,
    /// Width of the optional instance embedding; 0 feeds raw features.
    pub embed_dim: usize,
    pub online_attention: String,

    pub beta: f64,
    pub drop_rate: f64,
    pub momentum: f64,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub anchor: String,
    pub rho: f64,
    pub anchor_map: String,
    pub anchor_temperature: f64,
    pub entmax_alpha: f64,
    pub schedule: String,
    pub probe_bags: usize,
    pub trace_all: bool,
    pub standardize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            val_data: None,
            format: "bagds".into(),
            out_dir: PathBuf::from("run"),
            architecture: "asmil".into(),
            hidden_dim: 128,
            n_tokens: 8,
            embed_dim: 0,
            online_attention: "softmax".into(),
            beta: 1.0,
            drop_rate: 0.5,
            momentum: 0.99,
            lr: 1e-4,
            epochs: 50,
            weight_decay: 1e-4,
            seed: 0,
            anchor: "model".into(),
            rho: 0.9,
            anchor_map: "nsf".into(),
            anchor_temperature: 1.0,
            entmax_alpha: 1.5,
            schedule: "epoch".into(),
            probe_bags: 8,
            trace_all: false,
            standardize: false,
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Usage(format!("config error in `{field}`: {}", reason.into()))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            CliError::Usage(format!("invalid TOML: {}", e.message()))
        })?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config error: {}", e.message())))
    }

    pub fn dataset_format(&self) -> Result<DatasetFormat, CliError> {
        self.format
            .parse()
            .map_err(|_| bad("format", format!("unknown format `{}`", self.format)))
    }

    pub fn anchor_map(&self) -> Result<AttentionMap, CliError> {
        match self.anchor_map.as_str() {
            "nsf" => Ok(AttentionMap::Nsf),
            "softmax" => Ok(AttentionMap::Softmax {
                temperature: self.anchor_temperature,
            }),
            "entmax" => Ok(AttentionMap::Entmax {
                alpha: self.entmax_alpha,
            }),
            other => Err(bad(
                "anchor_map",
                format!("expected nsf, softmax or entmax, got `{other}`"),
            )),
        }
    }

    /// Builds the engine config once the data shape is known.
    pub fn train_config(
        &self,
        input_dim: usize,
        n_classes: usize,
    ) -> Result<TrainConfig, CliError> {
        let architecture = match self.architecture.as_str() {
            "abmil" => Architecture::Abmil,
            "asmil" => Architecture::Asmil,
            other => {
                return Err(bad(
                    "architecture",
                    format!("expected abmil or asmil, got `{other}`"),
                ))
            }
        };
        let online_attention = match self.online_attention.as_str() {
            "softmax" => OnlineAttention::Softmax,
            "mixed" => OnlineAttention::Mixed,
            other => {
                return Err(bad(
                    "online_attention",
                    format!("expected softmax or mixed, got `{other}`"),
                ))
            }
        };
        let anchor = match self.anchor.as_str() {
            "model" => AnchorStrategy::Model,
            "temporal" => AnchorStrategy::Temporal { rho: self.rho },
            "off" => AnchorStrategy::Off,
            other => {
                return Err(bad(
                    "anchor",
                    format!("expected model, temporal or off, got `{other}`"),
                ))
            }
        };
        let schedule = match self.schedule.as_str() {
            "epoch" => ScheduleGranularity::Epoch,
            "step" => ScheduleGranularity::Step,
            other => {
                return Err(bad(
                    "schedule",
                    format!("expected epoch or step, got `{other}`"),
                ))
            }
        };
        let model = ModelConfig {
            architecture,
            input_dim,
            hidden_dim: self.hidden_dim,
            n_tokens: self.n_tokens,
            n_classes,
            embed_dim: (self.embed_dim > 0).then_some(self.embed_dim),
            online_attention,
        };
        let cfg = TrainConfig {
            model,
            beta: self.beta,
            drop_rate: self.drop_rate,
            momentum: self.momentum,
            lr: self.lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed: self.seed,
            anchor,
            anchor_map: self.anchor_map()?,
            schedule,
            probe_bags: self.probe_bags,
            trace_all: self.trace_all,
            standardize: self.standardize,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
