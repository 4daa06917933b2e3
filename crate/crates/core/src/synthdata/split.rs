use super::corpus::Sample;
use crate::error::{Error, Result};

/// Train/val/test partition of a corpus.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Time-ordered split: sort by `(timestamp, id)`, then the first
/// `floor(n·train_pct/100)` samples train, the next `floor(n·val_pct/100)`
/// validate, and the remainder tests.
pub fn chronological_split(samples: &[Sample], train_pct: usize, val_pct: usize) -> Result<Splits> {
    if samples.len() < 10 {
        return Err(Error::Config(format!(
            "corpus of {} samples is too small to split",
            samples.len()
        )));
    }
    if train_pct + val_pct >= 100 {
        return Err(Error::Config("train and val shares leave no test split".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
    let n = sorted.len();
    let n_train = n * train_pct / 100;
    let n_val = n * val_pct / 100;
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(Splits {
        train: sorted,
        val,
        test,
    })
}

/// The 70/15/15 split.
pub fn default_split(samples: &[Sample]) -> Result<Splits> {
    chronological_split(samples, 70, 15)
}
