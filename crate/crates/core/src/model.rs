//! The full detector: backbone, artifact tokens, adapter stages and the
//! event-checking loss, driven by the component toggles.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::Serialize;
use rand_chacha::ChaCha8Rng;

use crate::adec::{adec_loss, match_labels, matching_scores, pool_global, AdecNorm};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pmoe::{
    acl_loss, apg_loss, artifact_tokens, entropy_regularizer, pmoe_loss, GateDecision, PmoeStage, StageOutput,
    StageParts,
};
use crate::synthdata::{assemble_prompt, CorpusSpec, Label, Manipulation, Sample, Splits};

/// Component switches, one per ablation column.
///
/// * `A` detection MoE without probability guidance
/// * `B` detection MoE with probability guidance
/// * `C` attribution MoE
/// * `D` attention-pooled artifact classification
/// * `E` event checking
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
    pub e: bool,
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        a: false,
        b: false,
        c: false,
        d: false,
        e: false,
    };
    pub const FULL: Toggles = Toggles {
        a: false,
        b: true,
        c: true,
        d: true,
        e: true,
    };

    /// Artifact tokens exist iff some adapter part is on.
    pub fn artifacts(self) -> bool {
        self.a || self.b || self.c || self.d
    }

    pub fn detection(self) -> bool {
        self.a || self.b
    }

    pub fn validate(self) -> Result<()> {
        if self.a && self.b {
            return Err(Error::Config("toggles A and B are mutually exclusive".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [(self.a, "A"), (self.b, "B"), (self.c, "C"), (self.d, "D"), (self.e, "E")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Accepts `none`, or letters `A`–`E` separated by `,` or `+`.
    fn from_str(s: &str) -> Result<Toggles> {
        let s = s.trim();
        let mut t = Toggles::NONE;
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(t);
        }
        for part in s.split([',', '+']) {
            let slot = match part.trim() {
                "A" | "a" => &mut t.a,
                "B" | "b" => &mut t.b,
                "C" | "c" => &mut t.c,
                "D" | "d" => &mut t.d,
                "E" | "e" => &mut t.e,
                other => return Err(Error::Config(format!("unknown toggle {other:?}"))),
            };
            if *slot {
                return Err(Error::Config(format!("toggle {} given twice", part.trim())));
            }
            *slot = true;
        }
        t.validate()?;
        Ok(t)
    }
}

/// The ablation grid, in table order.
pub fn ablation_rows() -> Vec<Toggles> {
    ["none", "A+D", "B+D", "C+D", "B+C+D", "B+C+E", "B+C+D+E"]
        .iter()
        .map(|s| s.parse().expect("static rows parse"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub artifact_tokens: usize,
    pub toggles: Toggles,
    pub gate_scaling: bool,
    pub entropy_reg: bool,
    pub tau: f64,
    pub adec_norm: AdecNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            artifact_tokens: 32,
            toggles: Toggles::FULL,
            gate_scaling: false,
            entropy_reg: false,
            tau: 0.07,
            adec_norm: AdecNorm::PerBatch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.toggles.validate()?;
        if self.toggles.artifacts() && self.artifact_tokens == 0 {
            return Err(Error::Config("adapter parts need at least one artifact token".into()));
        }
        if self.toggles.artifacts() && self.backbone.insert_layers.is_empty() {
            return Err(Error::Config("adapter parts need at least one insert layer".into()));
        }
        if self.entropy_reg && !self.toggles.c {
            return Err(Error::Config("the entropy term needs the attribution MoE (toggle C)".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// A sample turned into model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub prompt: Vec<u32>,
    pub frames: Vec<Vec<u32>>,
    pub label: Label,
    pub manipulation: Manipulation,
}

impl Example {
    pub fn from_sample(sample: &Sample, spec: &CorpusSpec, max_context: usize) -> Result<Example> {
        let prompt = assemble_prompt(&sample.description, &spec.event_tokens(sample.event_id), max_context)?;
        Ok(Example {
            id: sample.id.clone(),
            prompt,
            frames: sample.frames.clone(),
            label: sample.label,
            manipulation: sample.manipulation,
        })
    }
}

pub fn examples(samples: &[Sample], spec: &CorpusSpec, max_context: usize) -> Result<Vec<Example>> {
    samples.iter().map(|s| Example::from_sample(s, spec, max_context)).collect()
}

/// Train, validation and test examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn from_splits(splits: &Splits, spec: &CorpusSpec, max_context: usize) -> Result<Dataset> {
        Ok(Dataset {
            train: examples(&splits.train, spec, max_context)?,
            val: examples(&splits.val, spec, max_context)?,
            test: examples(&splits.test, spec, max_context)?,
        })
    }
}

/// Evaluation-time path through the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// The training-time forward with artifact tokens and the adapter.
    #[default]
    Full,
    /// Artifact tokens dropped; the plain backbone decodes.
    Bare,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "full" => Ok(Mode::Full),
            "bare" => Ok(Mode::Bare),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Bare => "bare",
        })
    }
}

/// One forward pass over one example.
pub struct SampleForward {
    /// `1 × 2` answer logits (REAL, FAKE).
    pub logits: Var,
    pub stages: Vec<StageOutput>,
    pub visual: Var,
    pub text: Var,
}

/// All loss terms of one batch. Disabled terms are exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub apg: f64,
    pub acl: f64,
    pub pmoe: f64,
    pub adec: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("ce", self.ce),
            ("apg", self.apg),
            ("acl", self.acl),
            ("pmoe", self.pmoe),
            ("adec", self.adec),
            ("entropy", self.entropy),
            ("total", self.total),
        ]
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.ce += k * other.ce;
        self.apg += k * other.apg;
        self.acl += k * other.acl;
        self.pmoe += k * other.pmoe;
        self.adec += k * other.adec;
        self.entropy += k * other.entropy;
        self.total += k * other.total;
    }
}

/// Parameter ids of every component.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub artifacts: Option<ParamId>,
    pub stages: Vec<PmoeStage>,
}

/// What evaluation reads off one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub label: Label,
    /// Token-mean detection probabilities of the last stage.
    pub detection: Option<[f64; 2]>,
    /// Attribution gate of the last stage.
    pub attribution: Option<GateDecision>,
}

/// Tie → fake.
pub fn decide(logits: [f64; 2]) -> Label {
    if logits[0] > logits[1] {
        Label::Real
    } else {
        Label::Fake
    }
}

impl Network {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Network> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bcfg = &cfg.backbone;
        let mut backbone = Backbone::new(bcfg, store, &mut rng)?;
        if bcfg.lora_rank > 0 {
            backbone.apply_lora(store, &mut rng, bcfg.lora_rank, bcfg.lora_alpha)?;
        }
        let t = cfg.toggles;
        let (artifacts, stages) = if t.artifacts() {
            let a = artifact_tokens(store, &mut rng, cfg.artifact_tokens, bcfg.hidden_dim)?;
            let parts = StageParts {
                detection: t.detection(),
                attribution: t.c,
                mgap: t.d,
            };
            let stages = bcfg
                .insert_layers
                .iter()
                .map(|l| PmoeStage::new(store, &mut rng, &format!("pmoe{l}"), bcfg.hidden_dim, bcfg.heads, parts))
                .collect();
            (Some(a), stages)
        } else {
            (None, Vec::new())
        };
        Ok(Network {
            backbone,
            artifacts,
            stages,
        })
    }

    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, ex: &Example, mode: Mode) -> Result<SampleForward> {
        let bb = &self.backbone;
        let visual = bb.encode_visual(tape, &ex.frames)?;
        let text = bb.embed_text(tape, &ex.prompt)?;
        let f_c = tape.concat_rows(&[visual, text])?;
        let depth = bb.config().depth;
        let mut stages = Vec::new();
        let x = match (self.artifacts, mode) {
            (Some(a), Mode::Full) => {
                let t_c = tape.rows(f_c);
                let q = cfg.artifact_tokens;
                let a = tape.param(a);
                let mut x = tape.concat_rows(&[f_c, a])?;
                let mut done = 0;
                for (stage, &layer) in self.stages.iter().zip(&bb.config().insert_layers) {
                    x = bb.forward_range(tape, x, done + 1, layer)?;
                    let stream = tape.slice_rows(x, 0, t_c)?;
                    let tokens = tape.slice_rows(x, t_c, q)?;
                    let out = stage.forward(tape, tokens, cfg.gate_scaling)?;
                    x = tape.concat_rows(&[stream, out.out])?;
                    stages.push(out);
                    done = layer;
                }
                bb.forward_range(tape, x, done + 1, depth)?
            }
            _ => bb.forward_range(tape, f_c, 1, depth)?,
        };
        let logits = bb.decode(tape, x)?;
        Ok(SampleForward {
            logits,
            stages,
            visual,
            text,
        })
    }

    /// Loss of one batch on one tape. Returns the scalar to differentiate and
    /// the per-term values.
    pub fn batch_loss(&self, tape: &mut Tape, cfg: &ModelConfig, batch: &[Example]) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let t = cfg.toggles;
        let n = batch.len() as f64;
        let mut ce = Vec::new();
        let mut apg = Vec::new();
        let mut acl = Vec::new();
        let mut ent = Vec::new();
        let mut pooled_v = Vec::new();
        let mut pooled_t = Vec::new();
        for ex in batch {
            let fw = self.forward(tape, cfg, ex, Mode::Full)?;
            let y = ex.label.y();
            let lp = tape.log_softmax_rows(fw.logits);
            ce.push(tape.pick(lp, ex.label.index())?);
            let k = fw.stages.len().max(1) as f64;
            for st in &fw.stages {
                if t.b {
                    let det = st.detection.as_ref().expect("detection built when B is on");
                    apg.push((apg_loss(tape, det.probs, y)?.1, k));
                }
                if let Some(m) = &st.mgap {
                    acl.push((acl_loss(tape, m.probs, y)?, k));
                }
                if cfg.entropy_reg {
                    let attr = st.attribution.as_ref().expect("attribution built when C is on");
                    ent.push((entropy_regularizer(tape, attr.probs)?, k));
                }
            }
            if t.e {
                pooled_v.push(pool_global(tape, fw.visual)?);
                let ctx = self.backbone.forward_early(tape, fw.text, self.backbone.config().split_layer)?;
                pooled_t.push(pool_global(tape, ctx)?);
            }
        }
        // Batch means; stage terms are additionally averaged over stages.
        let mean = |terms: Vec<(Var, f64)>, tape: &mut Tape| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let scaled: Vec<Var> = terms.iter().map(|&(v, k)| tape.scale(v, 1.0 / (k * n))).collect();
            Ok(Some(tape.add_scalars(&scaled)?))
        };
        let ce = mean(ce.into_iter().map(|v| (v, -1.0)).collect(), tape)?.expect("batch is nonempty");
        let apg = mean(apg, tape)?;
        let acl = mean(acl, tape)?;
        let ent = mean(ent, tape)?;
        let pmoe = pmoe_loss(tape, apg, acl)?;
        let adec = if t.e {
            let v = tape.concat_rows(&pooled_v)?;
            let tx = tape.concat_rows(&pooled_t)?;
            let (s_vt, s_tv) = matching_scores(tape, v, tx, cfg.tau)?;
            let labels: Vec<Label> = batch.iter().map(|e| e.label).collect();
            Some(adec_loss(tape, s_vt, s_tv, &match_labels(&labels), cfg.adec_norm)?.total)
        } else {
            None
        };
        let mut terms = vec![ce];
        terms.extend(pmoe);
        terms.extend(adec);
        terms.extend(ent);
        let total = tape.add_scalars(&terms)?;
        let val = |v: Option<Var>, tape: &Tape| v.map_or(0.0, |v| tape.scalar(v));
        let breakdown = LossBreakdown {
            ce: tape.scalar(ce),
            apg: val(apg, tape),
            acl: val(acl, tape),
            pmoe: val(pmoe, tape),
            adec: val(adec, tape),
            entropy: val(ent, tape),
            total: tape.scalar(total),
        };
        Ok((total, breakdown))
    }

    pub fn predict(&self, store: &ParamStore, cfg: &ModelConfig, ex: &Example, mode: Mode) -> Result<Prediction> {
        let mut tape = Tape::inference(store);
        let fw = self.forward(&mut tape, cfg, ex, mode)?;
        let v = tape.value(fw.logits);
        let logits = [v[0], v[1]];
        let last = fw.stages.last();
        let detection = last
            .and_then(|s| s.detection.as_ref())
            .map(|d| {
                let m = d.decision.mean_probs();
                [m[0], m[1]]
            });
        let attribution = last.and_then(|s| s.attribution.as_ref()).map(|a| a.decision.clone());
        Ok(Prediction {
            logits,
            label: decide(logits),
            detection,
            attribution,
        })
    }
}

/// Configuration, parameters and architecture together.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        let mut params = ParamStore::new();
        let net = Network::new(&config, &mut params, seed)?;
        Ok(Model { config, params, net })
    }

    pub fn predict(&self, ex: &Example, mode: Mode) -> Result<Prediction> {
        self.net.predict(&self.params, &self.config, ex, mode)
    }

    /// Loss of a batch without recording gradients.
    pub fn loss(&self, batch: &[Example]) -> Result<LossBreakdown> {
        let mut tape = Tape::inference(&self.params);
        Ok(self.net.batch_loss(&mut tape, &self.config, batch)?.1)
    }

    /// Accumulates the batch gradient into the parameter store.
    pub fn accumulate_gradients(&mut self, batch: &[Example]) -> Result<LossBreakdown> {
        let (grads, breakdown) = {
            let mut tape = Tape::with_params(&self.params);
            let (loss, breakdown) = self.net.batch_loss(&mut tape, &self.config, batch)?;
            breakdown.check_finite()?;
            (tape.backward(loss)?, breakdown)
        };
        self.params.accumulate(&grads)?;
        Ok(breakdown)
    }
}
