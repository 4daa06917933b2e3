//! Optimization: schedule, AdamW, the epoch loop, checkpoints and the
//! pre-training gradient audit.

mod audit;
mod checkpoint;

pub use audit::{component_of, gradient_audit, AuditReport, ComponentSummary, AUDIT_TOLERANCE};
pub use checkpoint::{apply_checkpoint, checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint, Entry, MAGIC};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Evaluation};
use crate::model::{Example, LossBreakdown, Mode, Model};
use crate::params::ParamStore;

/// Loss above which a run is abandoned.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Finite-difference probes checked before the first step; 0 skips.
    pub preflight_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 4,
            peak_lr: 8e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            preflight_probes: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and decay nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1))
}

/// Linear warmup from 0 to `peak` over `⌈fraction·total⌉` steps, then cosine
/// decay to 0 at `total`. The k-th update (1-based) uses `lr_at_step(k, ..)`.
pub fn lr_at_step(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_fraction);
    let step = step.min(total_steps);
    if step <= warm {
        return peak * (step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled decay on parameters flagged for it.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.trainable() { vec![0.0; p.tensor.len()] } else { Vec::new() })
            .collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> AdamW {
        AdamW::new(store, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, p) in store.iter_mut() {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if m.len() != g.len() {
                return Err(Error::Contract(format!("optimizer state does not match {}", p.name)));
            }
            let shrink = if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (i, w) in p.tensor.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = *w * shrink - lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub train: LossBreakdown,
    pub val: Evaluation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// 1-based epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub preflight: Option<AuditReport>,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

fn better(a: &Evaluation, b: &Evaluation) -> bool {
    (a.metrics.acc, a.metrics.macro_f1) > (b.metrics.acc, b.metrics.macro_f1)
}

/// Trains in place and leaves the best validation epoch's parameters loaded.
/// `on_step` sees every step record as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be nonempty".into()));
    }
    let preflight = if cfg.preflight_probes > 0 {
        let n = cfg.batch_size.min(train_set.len());
        let report = gradient_audit(model, &train_set[..n], cfg.preflight_probes, cfg.seed)?;
        if report.max_rel_error > AUDIT_TOLERANCE {
            let worst = report.worst();
            return Err(Error::Contract(format!(
                "gradient audit failed: {} [{}] has relative error {:.3e}",
                worst.name, worst.index, worst.rel_error
            )));
        }
        Some(report)
    } else {
        None
    };

    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::from_config(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = Vec::with_capacity(total);
    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Vec<Vec<f64>>)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<Example> = idx.iter().map(|&i| train_set[i].clone()).collect();
            model.params.zero_grads();
            let loss = model.accumulate_gradients(&batch)?;
            if loss.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { step, loss: loss.total });
            }
            let lr = lr_at_step(step, total, cfg.peak_lr, cfg.warmup_fraction);
            opt.step(&mut model.params, lr)?;
            let rec = StepRecord { step, epoch, lr, loss };
            on_step(&rec);
            steps.push(rec);
            sum.add_scaled(&loss, 1.0 / per_epoch as f64);
        }
        let val = evaluate(model, val_set, Mode::Full)?;
        let improved = best
            .as_ref()
            .is_none_or(|(e, _)| better(&val, &epochs[*e - 1].val));
        epochs.push(EpochRecord { epoch, train: sum, val });
        if improved {
            best = Some((epoch, model.params.snapshot()));
        }
    }
    model.params.zero_grads();
    let (best_epoch, snapshot) = best.expect("at least one epoch ran");
    model.params.restore(&snapshot)?;
    Ok(TrainOutcome {
        best_epoch,
        steps,
        epochs,
        preflight,
    })
}
