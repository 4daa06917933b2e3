//! Inference, metrics, routing analysis and the experiment runners.

mod metrics;
mod report;
mod runs;

pub use metrics::{macro_metrics, ConfusionMatrix, MetricsReport};
pub use report::{metrics_table, write_records};
pub use runs::{hyperparameter_sweep, run_ablation, RunResult, SweepParam};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Example, Mode, Model, Prediction};
use crate::synthdata::Manipulation;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "FSVVLM_THREADS";

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Predictions in input order. Parallel over samples, read-only on the model.
pub fn predict_all(model: &Model, examples: &[Example], mode: Mode) -> Result<Vec<Prediction>> {
    pool()?.install(|| examples.par_iter().map(|ex| model.predict(ex, mode)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub mode: String,
    pub samples: usize,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// Mean per-token attribution gate entropy, when that gate exists.
    pub attribution_entropy: Option<f64>,
}

pub fn label_confusion(examples: &[Example], predictions: &[Prediction]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(2);
    for (ex, p) in examples.iter().zip(predictions) {
        cm.record(ex.label.index(), p.label.index());
    }
    cm
}

pub fn evaluate(model: &Model, examples: &[Example], mode: Mode) -> Result<Evaluation> {
    let preds = predict_all(model, examples, mode)?;
    summarize(examples, &preds, mode)
}

pub fn summarize(examples: &[Example], predictions: &[Prediction], mode: Mode) -> Result<Evaluation> {
    let confusion = label_confusion(examples, predictions);
    Ok(Evaluation {
        mode: mode.to_string(),
        samples: examples.len(),
        metrics: macro_metrics(&confusion)?,
        confusion,
        attribution_entropy: mean_attribution_entropy(predictions),
    })
}

/// Mean per-token entropy of the attribution gate across a split.
pub fn mean_attribution_entropy(predictions: &[Prediction]) -> Option<f64> {
    let e: Vec<f64> = predictions
        .iter()
        .filter_map(|p| p.attribution.as_ref().map(|a| a.mean_token_entropy()))
        .collect();
    (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingReport {
    /// Token-mean detection gate argmax against the real/fake label.
    pub detection: Option<ConfusionMatrix>,
    pub detection_metrics: Option<MetricsReport>,
    /// Majority attribution expert against the manipulation type.
    pub attribution: Option<ConfusionMatrix>,
    pub attribution_metrics: Option<MetricsReport>,
    pub head: MetricsReport,
    pub attribution_entropy: Option<f64>,
}

pub fn routing_confusion(model: &Model, examples: &[Example]) -> Result<RoutingReport> {
    let t = model.config.toggles;
    if !t.detection() && !t.c {
        return Err(Error::Contract("routing analysis needs a detection or attribution MoE".into()));
    }
    let preds = predict_all(model, examples, Mode::Full)?;
    let mut det = t.detection().then(|| ConfusionMatrix::new(2));
    let mut attr = t.c.then(|| ConfusionMatrix::new(Manipulation::ALL.len()));
    for (ex, p) in examples.iter().zip(&preds) {
        if let (Some(cm), Some(d)) = (det.as_mut(), p.detection) {
            // Expert 0 reads as real; ties go to fake as for the answer head.
            let guess = if d[0] > d[1] { 0 } else { 1 };
            cm.record(ex.label.index(), guess);
        }
        if let (Some(cm), Some(a)) = (attr.as_mut(), &p.attribution) {
            cm.record(ex.manipulation.index(), a.majority());
        }
    }
    let metrics = |cm: &Option<ConfusionMatrix>| cm.as_ref().map(macro_metrics).transpose();
    Ok(RoutingReport {
        detection_metrics: metrics(&det)?,
        attribution_metrics: metrics(&attr)?,
        detection: det,
        attribution: attr,
        head: macro_metrics(&label_confusion(examples, &preds))?,
        attribution_entropy: mean_attribution_entropy(&preds),
    })
}
