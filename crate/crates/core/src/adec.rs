//! Cross-modal event checking: a symmetric, temperature-scaled contrastive
//! loss between pooled video and pooled text embeddings. Only the diagonal
//! pairs of real samples count as matches.

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::pmoe::PROB_FLOOR;
use crate::synthdata::Label;

/// Floor on embedding norms inside the cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

/// How the summed log-scores are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdecNorm {
    /// Divide by the batch size `N`, whatever the number of matches.
    #[default]
    PerBatch,
    /// Divide by the number of matched pairs (0 when there are none).
    PerPair,
}

#[derive(Clone, Copy, Debug)]
pub struct AdecLosses {
    pub v_to_t: Var,
    pub t_to_v: Var,
    pub total: Var,
}

/// Mean over the token axis, `1 × d`.
pub fn pool_global(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.rows(x) == 0 {
        return Err(Error::Data("cannot pool zero tokens".into()));
    }
    tape.mean_rows(x)
}

/// Row-softmaxed cosine similarities over `tau`, video→text and text→video.
pub fn matching_scores(tape: &mut Tape, video: Var, text: Var, tau: f64) -> Result<(Var, Var)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if tape.shape(video) != tape.shape(text) || tape.rows(video) == 0 {
        return Err(shape_err!(
            "pooled video {:?} and text {:?} must be matching nonempty batches",
            tape.shape(video),
            tape.shape(text)
        ));
    }
    let v = tape.l2_normalize_rows(video, NORM_FLOOR);
    let t = tape.l2_normalize_rows(text, NORM_FLOOR);
    let vt = tape.matmul_nt(v, t)?;
    let vt = tape.scale(vt, 1.0 / tau);
    let tv = tape.matmul_nt(t, v)?;
    let tv = tape.scale(tv, 1.0 / tau);
    Ok((tape.softmax(vt, Axis::Cols), tape.softmax(tv, Axis::Cols)))
}

/// `N × N` row-major indicator: 1 exactly on the diagonal of real samples.
pub fn match_labels(labels: &[Label]) -> Vec<f64> {
    let n = labels.len();
    let mut m = vec![0.0; n * n];
    for (i, l) in labels.iter().enumerate() {
        if *l == Label::Real {
            m[i * n + i] = 1.0;
        }
    }
    m
}

/// `L = −(1/N)·Σ_ij I_ij ln s_ij` per direction and their mean.
pub fn adec_loss(tape: &mut Tape, s_vt: Var, s_tv: Var, matches: &[f64], norm: AdecNorm) -> Result<AdecLosses> {
    let n = tape.rows(s_vt);
    if tape.shape(s_vt) != (n, n) || tape.shape(s_tv) != (n, n) || matches.len() != n * n {
        return Err(shape_err!("score matrices and match labels must all be {n}x{n}"));
    }
    let denom = match norm {
        AdecNorm::PerBatch => n as f64,
        AdecNorm::PerPair => matches.iter().sum::<f64>(),
    };
    let k = if denom > 0.0 { -1.0 / denom } else { 0.0 };
    let mut direction = |s: Var| -> Result<Var> {
        let logs = tape.log_clamp(s, PROB_FLOOR, 1.0);
        let sum = tape.weighted_sum(logs, matches)?;
        Ok(tape.scale(sum, k))
    };
    let v_to_t = direction(s_vt)?;
    let t_to_v = direction(s_tv)?;
    let both = tape.add(v_to_t, t_to_v)?;
    let total = tape.scale(both, 0.5);
    Ok(AdecLosses { v_to_t, t_to_v, total })
}
