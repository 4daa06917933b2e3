use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{evaluate, MetricsReport};
use crate::error::{Error, Result};
use crate::model::{ablation_rows, Dataset, Mode, Model, ModelConfig};
use crate::trainer::{train, TrainConfig};

/// One trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub label: String,
    pub best_epoch: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

pub fn train_and_score(label: String, cfg: ModelConfig, train_cfg: &TrainConfig, data: &Dataset) -> Result<RunResult> {
    let mut model = Model::new(cfg, train_cfg.seed)?;
    let outcome = train(&mut model, &data.train, &data.val, train_cfg, |_| {})?;
    Ok(RunResult {
        label,
        best_epoch: outcome.best_epoch,
        val: outcome.best().val.metrics,
        test: evaluate(&model, &data.test, Mode::Full)?.metrics,
    })
}

/// Every ablation row trained with the same seed and schedule, in table order.
pub fn run_ablation(data: &Dataset, base: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<RunResult>> {
    ablation_rows()
        .into_iter()
        .map(|toggles| {
            let cfg = ModelConfig {
                toggles,
                entropy_reg: base.entropy_reg && toggles.c,
                ..base.clone()
            };
            train_and_score(toggles.to_string(), cfg, train_cfg, data)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Artifact token count.
    ArtifactTokens,
    /// Split layer; the single adapter stage follows it.
    SplitLayer,
    /// Adapter insertion layers, e.g. `2+3`.
    InsertLayers,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<SweepParam> {
        match s {
            "q" => Ok(SweepParam::ArtifactTokens),
            "l" => Ok(SweepParam::SplitLayer),
            "layers" => Ok(SweepParam::InsertLayers),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?} (expected q, l or layers)"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::ArtifactTokens => "q",
            SweepParam::SplitLayer => "l",
            SweepParam::InsertLayers => "layers",
        })
    }
}

fn parse_count(v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("sweep value {v:?} is not a nonnegative integer")))
}

/// Layer lists are written with `+` between entries.
pub fn parse_layers(v: &str) -> Result<Vec<usize>> {
    v.split('+').map(parse_count).collect()
}

fn apply(param: SweepParam, value: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::ArtifactTokens => cfg.artifact_tokens = parse_count(value)?,
        SweepParam::SplitLayer => {
            let l = parse_count(value)?;
            cfg.backbone.split_layer = l;
            cfg.backbone.insert_layers = vec![l];
        }
        SweepParam::InsertLayers => cfg.backbone.insert_layers = parse_layers(value)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One run per value with a fixed seed. All values are validated up front.
pub fn hyperparameter_sweep(
    param: SweepParam,
    values: &[String],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<RunResult>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cfgs = values
        .iter()
        .map(|v| apply(param, v, base))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(cfgs)
        .map(|(v, cfg)| train_and_score(format!("{param}={v}"), cfg, train_cfg, data))
        .collect()
}
