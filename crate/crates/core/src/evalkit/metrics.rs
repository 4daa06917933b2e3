use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<ConfusionMatrix> {
        let classes = rows.len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Contract("confusion matrix must be square and nonempty".into()));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    /// Binary matrix with class 0 = real, class 1 = fake (the positive class).
    pub fn binary(tp: u64, fn_: u64, fp: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix {
            classes: 2,
            counts: vec![tn, fp, fn_, tp],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        assert!(truth < self.classes && predicted < self.classes, "class out of range");
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.counts.iter().map(|c| c.to_string().len()).max().unwrap_or(1);
        for row in self.counts.chunks(self.classes) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>width$}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Percentages rounded to two decimals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub macro_f1: f64,
    pub macro_p: f64,
    pub macro_r: f64,
}

fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted per-class means. A zero denominator counts as 0.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let k = cm.classes;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = cm.get(c, c);
        let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let actual: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f1;
    }
    let trace: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    let k = k as f64;
    Ok(MetricsReport {
        acc: pct(ratio(trace, total)),
        macro_f1: pct(f_sum / k),
        macro_p: pct(p_sum / k),
        macro_r: pct(r_sum / k),
    })
}
