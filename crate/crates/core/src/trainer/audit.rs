use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_params, ProbeResult, Tape, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::params::ParamId;

pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub probes: Vec<ProbeResult>,
    pub max_rel_error: f64,
}

impl AuditReport {
    pub fn worst(&self) -> &ProbeResult {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("audit has probes")
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= AUDIT_TOLERANCE
    }

    /// Probe counts per component, in first-seen order.
    pub fn by_component(&self) -> Vec<ComponentSummary> {
        let mut out: Vec<ComponentSummary> = Vec::new();
        for r in &self.probes {
            let c = component_of(&r.name);
            let entry = match out.iter_mut().position(|s| s.component == c) {
                Some(i) => &mut out[i],
                None => {
                    out.push(ComponentSummary {
                        component: c,
                        probes: 0,
                        nonzero: 0,
                        max_rel_error: 0.0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            entry.probes += 1;
            entry.nonzero += usize::from(r.analytic != 0.0);
            entry.max_rel_error = entry.max_rel_error.max(r.rel_error);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSummary {
    pub component: &'static str,
    pub probes: usize,
    /// Probes whose analytic gradient is not exactly zero.
    pub nonzero: usize,
    pub max_rel_error: f64,
}

/// Coarse component of a parameter, read off its name.
pub fn component_of(name: &str) -> &'static str {
    let moe = |kind: &'static str, gate: &'static str, experts: &'static str| {
        if name.contains(".gate.") {
            gate
        } else if name.contains(".expert") {
            experts
        } else {
            kind
        }
    };
    if name.starts_with("artifact_tokens") {
        "artifact tokens"
    } else if name.contains(".lora_") {
        "lora"
    } else if name.contains(".detection.") {
        moe("detection other", "detection gate", "detection experts")
    } else if name.contains(".attribution.") {
        moe("attribution other", "attribution gate", "attribution experts")
    } else if name.contains(".mgap.") {
        "mgap"
    } else if name.starts_with("answer_head") {
        "answer head"
    } else {
        "backbone"
    }
}

/// Central differences on sampled trainable coordinates of the batch loss.
///
/// Every trainable tensor gets one random coordinate; further coordinates are
/// drawn until `min_probes` is reached.
pub fn gradient_audit(model: &mut Model, batch: &[Example], min_probes: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<(ParamId, usize)> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable())
        .map(|(id, p)| (id, p.tensor.len()))
        .collect();
    if trainable.is_empty() {
        return Err(Error::Contract("no trainable parameters to audit".into()));
    }
    let mut probes: Vec<(ParamId, usize)> = trainable.iter().map(|&(id, n)| (id, rng.random_range(0..n))).collect();
    while probes.len() < min_probes {
        let &(id, n) = trainable.choose(&mut rng).expect("nonempty");
        probes.push((id, rng.random_range(0..n)));
    }

    let saved: Vec<Option<Vec<f64>>> = model.params.iter().map(|(_, p)| p.tensor.grad().map(<[f64]>::to_vec)).collect();
    model.params.zero_grads();
    model.accumulate_gradients(batch)?;
    let Model { config, params, net } = model;
    let results = check_params(params, &probes, DEFAULT_STEP, |s| {
        let mut tape = Tape::inference(s);
        Ok(net.batch_loss(&mut tape, config, batch)?.1.total)
    });
    for ((_, p), g) in model.params.iter_mut().zip(saved) {
        if let (Some(dst), Some(g)) = (p.tensor.grad_mut(), g) {
            dst.copy_from_slice(&g);
        }
    }
    let probes = results?;
    let max_rel_error = probes.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(AuditReport { probes, max_rel_error })
}
