//! Flat `key=value` run configuration with per-key provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::adec::AdecNorm;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, Toggles};
use crate::synthdata::CorpusSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Every tunable of one run. Vocabulary and frame shape are shared by the
/// generator and the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: Mode,
    provenance: BTreeMap<&'static str, Source>,
}

/// Recognised keys in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "events",
    "samples",
    "mix",
    "text_vocab",
    "visual_vocab",
    "frames",
    "patches_per_frame",
    "description_len",
    "event_len",
    "signature_width",
    "corruption",
    "depth",
    "split_layer",
    "hidden_dim",
    "heads",
    "lora_rank",
    "lora_alpha",
    "insert_layers",
    "max_context",
    "init_scale",
    "artifact_tokens",
    "toggles",
    "gate_scaling",
    "entropy_reg",
    "tau",
    "adec_norm",
    "epochs",
    "batch_size",
    "peak_lr",
    "warmup_fraction",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "preflight_probes",
    "mode",
];

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: expected {what}, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key {key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v, what)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mode: Mode::Full,
            provenance: KEYS.iter().map(|&k| (k, Source::Default)).collect(),
        };
        cfg.sync_shared();
        cfg
    }
}

impl RunConfig {
    /// Defaults, then the file's pairs, then the flag pairs.
    pub fn resolve(file: Option<&str>, flags: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file {
            for (line, key, value) in parse_file(text)? {
                cfg.set(&key, &value, Source::File)
                    .map_err(|e| Error::Config(format!("config file line {line}: {}", strip(e))))?;
            }
        }
        for (key, value) in flags {
            cfg.set(key, value, Source::Flag)
                .map_err(|e| Error::Config(format!("flag: {}", strip(e))))?;
        }
        if cfg.source("insert_layers") == Source::Default {
            cfg.model.backbone.insert_layers = vec![cfg.model.backbone.split_layer];
        }
        cfg.sync_shared();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn source(&self, key: &str) -> Source {
        self.provenance.get(key).copied().unwrap_or(Source::Default)
    }

    fn sync_shared(&mut self) {
        let b = &mut self.model.backbone;
        b.text_vocab = self.corpus.text_vocab;
        b.visual_vocab = self.corpus.visual_vocab;
        b.frames = self.corpus.frames;
        b.patches_per_frame = self.corpus.patches_per_frame;
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let c = &mut self.corpus;
        let m = &mut self.model;
        let b = &mut m.backbone;
        let t = &mut self.train;
        const INT: &str = "a nonnegative integer";
        const REAL: &str = "a number";
        match key {
            "seed" => {
                let s: u64 = parse(key, value, INT)?;
                c.seed = s;
                t.seed = s;
            }
            "events" => c.n_events = parse(key, value, INT)?,
            "samples" => c.n_samples = parse(key, value, INT)?,
            "mix" => {
                let v: Vec<f64> = parse_list(key, value, REAL)?;
                c.mix = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("key mix: expected 4 comma-separated numbers, got {value:?}")))?;
            }
            "text_vocab" => c.text_vocab = parse(key, value, INT)?,
            "visual_vocab" => c.visual_vocab = parse(key, value, INT)?,
            "frames" => c.frames = parse(key, value, INT)?,
            "patches_per_frame" => c.patches_per_frame = parse(key, value, INT)?,
            "description_len" => c.description_len = parse(key, value, INT)?,
            "event_len" => c.event_len = parse(key, value, INT)?,
            "signature_width" => c.signature_width = parse(key, value, INT)?,
            "corruption" => c.corruption_strength = parse(key, value, REAL)?,
            "depth" => b.depth = parse(key, value, INT)?,
            "split_layer" => b.split_layer = parse(key, value, INT)?,
            "hidden_dim" => b.hidden_dim = parse(key, value, INT)?,
            "heads" => b.heads = parse(key, value, INT)?,
            "lora_rank" => b.lora_rank = parse(key, value, INT)?,
            "lora_alpha" => b.lora_alpha = parse(key, value, REAL)?,
            "insert_layers" => b.insert_layers = parse_list(key, value, "a comma list of layers")?,
            "max_context" => b.max_context = parse(key, value, INT)?,
            "init_scale" => b.init_scale = parse(key, value, REAL)?,
            "artifact_tokens" => m.artifact_tokens = parse(key, value, INT)?,
            "toggles" => {
                m.toggles = value
                    .parse::<Toggles>()
                    .map_err(|e| Error::Config(format!("key toggles: {}", strip(e))))?
            }
            "gate_scaling" => m.gate_scaling = parse_bool(key, value)?,
            "entropy_reg" => m.entropy_reg = parse_bool(key, value)?,
            "tau" => m.tau = parse(key, value, REAL)?,
            "adec_norm" => {
                m.adec_norm = match value.trim() {
                    "per_batch" => AdecNorm::PerBatch,
                    "per_pair" => AdecNorm::PerPair,
                    _ => return Err(Error::Config(format!("key adec_norm: expected per_batch or per_pair, got {value:?}"))),
                }
            }
            "epochs" => t.epochs = parse(key, value, INT)?,
            "batch_size" => t.batch_size = parse(key, value, INT)?,
            "peak_lr" => t.peak_lr = parse(key, value, REAL)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value, REAL)?,
            "weight_decay" => t.weight_decay = parse(key, value, REAL)?,
            "beta1" => t.beta1 = parse(key, value, REAL)?,
            "beta2" => t.beta2 = parse(key, value, REAL)?,
            "eps" => t.eps = parse(key, value, REAL)?,
            "preflight_probes" => t.preflight_probes = parse(key, value, INT)?,
            "mode" => {
                self.mode = value
                    .trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("key mode: {}", strip(e))))?
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        let k = KEYS.iter().find(|&&k| k == key).expect("matched keys are listed");
        self.provenance.insert(k, source);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.corpus;
        let m = &self.model;
        let b = &m.backbone;
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "events" => c.n_events.to_string(),
            "samples" => c.n_samples.to_string(),
            "mix" => join(&c.mix),
            "text_vocab" => c.text_vocab.to_string(),
            "visual_vocab" => c.visual_vocab.to_string(),
            "frames" => c.frames.to_string(),
            "patches_per_frame" => c.patches_per_frame.to_string(),
            "description_len" => c.description_len.to_string(),
            "event_len" => c.event_len.to_string(),
            "signature_width" => c.signature_width.to_string(),
            "corruption" => c.corruption_strength.to_string(),
            "depth" => b.depth.to_string(),
            "split_layer" => b.split_layer.to_string(),
            "hidden_dim" => b.hidden_dim.to_string(),
            "heads" => b.heads.to_string(),
            "lora_rank" => b.lora_rank.to_string(),
            "lora_alpha" => b.lora_alpha.to_string(),
            "insert_layers" => join(&b.insert_layers),
            "max_context" => b.max_context.to_string(),
            "init_scale" => b.init_scale.to_string(),
            "artifact_tokens" => m.artifact_tokens.to_string(),
            "toggles" => m.toggles.to_string(),
            "gate_scaling" => m.gate_scaling.to_string(),
            "entropy_reg" => m.entropy_reg.to_string(),
            "tau" => m.tau.to_string(),
            "adec_norm" => match m.adec_norm {
                AdecNorm::PerBatch => "per_batch".into(),
                AdecNorm::PerPair => "per_pair".into(),
            },
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "peak_lr" => t.peak_lr.to_string(),
            "warmup_fraction" => t.warmup_fraction.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "preflight_probes" => t.preflight_probes.to_string(),
            "mode" => self.mode.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; parses back to the same config.
    pub fn to_cfg_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Where each key's value came from.
    pub fn provenance_string(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.source(k))).collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// `(line number, key, value)` triples; blank lines and `#` comments skipped.
pub fn parse_file(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config file line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
