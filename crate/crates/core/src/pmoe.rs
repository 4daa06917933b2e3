//! The progressive mixture-of-experts adapter.
//!
//! A stage takes contextualized artifact tokens through a Detection MoE
//! (two experts: real, fake), an Attribution MoE (four experts: real, fake
//! video, fake text, fake both) and an attention-pooled real/fake head.
//! Each MoE block is multi-query attention, a softmax gate with hard top-1
//! routing, and `LN(Exp_z(LN(x))) + x` on the attended tokens.

use rand::Rng;

use crate::autodiff::{Axis, Tape, Var};
use crate::backbone::Backbone;
use crate::error::{shape_err, Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{normal, ParamGroup, ParamId, ParamStore};

/// Clamp applied to every probability before a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Index of the largest entry; ties go to the lowest index.
pub fn top1(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Per-token gate probabilities and the expert each token was sent to.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub experts: usize,
    /// `tokens × experts`, row-major.
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
}

impl GateDecision {
    pub fn from_probs(probs: Vec<f64>, experts: usize) -> GateDecision {
        let selected = probs.chunks(experts).map(top1).collect();
        GateDecision {
            experts,
            probs,
            selected,
        }
    }

    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn token_probs(&self, i: usize) -> &[f64] {
        &self.probs[i * self.experts..(i + 1) * self.experts]
    }

    /// Mean probability per expert over tokens (the sample-level `p_r, p_f`
    /// for the detection gate).
    pub fn mean_probs(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.experts];
        for row in self.probs.chunks(self.experts) {
            m.iter_mut().zip(row).for_each(|(a, p)| *a += p);
        }
        let n = self.tokens().max(1) as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Most frequently selected expert; ties go to the lowest index.
    pub fn majority(&self) -> usize {
        let mut counts = vec![0.0; self.experts];
        self.selected.iter().for_each(|&z| counts[z] += 1.0);
        top1(&counts)
    }

    /// Mean over tokens of each token's gate entropy, in nats.
    pub fn mean_token_entropy(&self) -> f64 {
        let h: f64 = self
            .probs
            .chunks(self.experts)
            .map(|row| entropy(row))
            .sum();
        h / self.tokens().max(1) as f64
    }
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Per-head queries with one shared key and value projection.
#[derive(Clone, Debug)]
pub struct MultiQueryAttention {
    heads: usize,
    /// `d × d`: the `h` per-head `d × d_k` query matrices side by side.
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl MultiQueryAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, group: ParamGroup) -> Self {
        let dk = d / heads;
        let std = 1.0 / (d as f64).sqrt();
        let lin = |store: &mut ParamStore, rng: &mut _, part: &str, i, o, s| {
            Linear::new(store, rng, &format!("{name}.{part}"), i, o, s, false, group, true)
        };
        MultiQueryAttention {
            heads,
            wq: lin(store, rng, "wq", d, d, std),
            wk: lin(store, rng, "wk", d, dk, std),
            wv: lin(store, rng, "wv", d, dk, std),
            wo: lin(store, rng, "wo", d, d, 1.0 / (d as f64).sqrt()),
        }
    }

    /// `softmax((A·W_q,i)(A·W_k)ᵀ/√d_k)·(A·W_v)` per head, heads
    /// concatenated and projected back to `d`. No positional term and no mask.
    pub fn forward(&self, tape: &mut Tape, a: Var) -> Result<Var> {
        let d = tape.cols(a);
        let dk = d / self.heads;
        let q = self.wq.forward(tape, a)?;
        let k = self.wk.forward(tape, a)?;
        let v = self.wv.forward(tape, a)?;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = tape.slice_cols(q, i * dk, dk)?;
            let s = tape.matmul_nt(qh, k)?;
            let s = tape.scale(s, inv);
            let p = tape.softmax(s, Axis::Cols);
            heads.push(tape.matmul(p, v)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.wo.forward(tape, cat)
    }
}

#[derive(Clone, Debug)]
struct Expert {
    fc1: Linear,
    fc2: Linear,
}

/// One sparse block: attention, gate, experts and two layer norms.
#[derive(Clone, Debug)]
pub struct MoeBlock {
    pub attention: MultiQueryAttention,
    pub gate: Linear,
    experts: Vec<Expert>,
    ln_in: LayerNorm,
    ln_out: LayerNorm,
}

/// Everything a block produced for one sequence of tokens.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub attended: Var,
    /// `q × E` gate probabilities on the tape.
    pub probs: Var,
    pub decision: GateDecision,
    pub out: Var,
}

impl MoeBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        experts: usize,
        group: ParamGroup,
    ) -> MoeBlock {
        let attention = MultiQueryAttention::new(store, rng, &format!("{name}.attn"), d, heads, group);
        let gate = Linear::new(store, rng, &format!("{name}.gate"), d, experts, 1.0 / (d as f64).sqrt(), true, group, true);
        let hidden = 4 * d;
        let experts = (0..experts)
            .map(|e| Expert {
                fc1: Linear::new(store, rng, &format!("{name}.expert{e}.fc1"), d, hidden, 1.0 / (d as f64).sqrt(), true, group, true),
                fc2: Linear::new(store, rng, &format!("{name}.expert{e}.fc2"), hidden, d, 1.0 / (hidden as f64).sqrt(), true, group, true),
            })
            .collect();
        MoeBlock {
            attention,
            gate,
            experts,
            ln_in: LayerNorm::new(store, &format!("{name}.ln_in"), d, group, true),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d, group, true),
        }
    }

    pub fn experts(&self) -> usize {
        self.experts.len()
    }

    /// First-layer weight of expert `e`.
    pub fn expert_weight(&self, e: usize) -> ParamId {
        self.experts[e].fc1.w
    }

    pub fn route_top1(&self, tape: &mut Tape, tokens: Var) -> Result<(Var, GateDecision)> {
        let logits = self.gate.forward(tape, tokens)?;
        if tape.cols(logits) != self.experts.len() {
            return Err(shape_err!("gate width {} for {} experts", tape.cols(logits), self.experts.len()));
        }
        let probs = tape.softmax(logits, Axis::Cols);
        let decision = GateDecision::from_probs(tape.value(probs).to_vec(), self.experts.len());
        Ok((probs, decision))
    }

    /// `LN(Exp_{z_i}(LN(x_i))) + x_i` per token. Each expert only sees the
    /// tokens routed to it, so unselected experts get no gradient. With
    /// `gate_scaling` the branch is multiplied by the winning probability.
    pub fn expert_transform(
        &self,
        tape: &mut Tape,
        tokens: Var,
        decision: &GateDecision,
        probs: Var,
        gate_scaling: bool,
    ) -> Result<Var> {
        let n = tape.rows(tokens);
        if decision.tokens() != n {
            return Err(shape_err!("decision covers {} of {n} tokens", decision.tokens()));
        }
        let normed = self.ln_in.forward(tape, tokens)?;
        let mut parts = Vec::new();
        let mut position = vec![0; n];
        let mut offset = 0;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| decision.selected[i] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(normed, &rows)?;
            let h = expert.fc1.forward(tape, x)?;
            let h = tape.gelu(h);
            parts.push(expert.fc2.forward(tape, h)?);
            for (k, &i) in rows.iter().enumerate() {
                position[i] = offset + k;
            }
            offset += rows.len();
        }
        let branch = match parts.len() {
            0 => return Ok(tokens),
            1 => parts[0],
            _ => tape.concat_rows(&parts)?,
        };
        let branch = tape.gather_rows(branch, &position)?;
        let mut branch = self.ln_out.forward(tape, branch)?;
        if gate_scaling {
            let winner = tape.pick_per_row(probs, &decision.selected)?;
            branch = tape.mul_col(branch, winner)?;
        }
        tape.add(branch, tokens)
    }

    pub fn forward(&self, tape: &mut Tape, tokens: Var, gate_scaling: bool) -> Result<MoeOutput> {
        let attended = self.attention.forward(tape, tokens)?;
        let (probs, decision) = self.route_top1(tape, attended)?;
        let out = self.expert_transform(tape, attended, &decision, probs, gate_scaling)?;
        Ok(MoeOutput {
            attended,
            probs,
            decision,
            out,
        })
    }
}

/// Attention pooling over tokens followed by a two-layer real/fake head.
#[derive(Clone, Debug)]
pub struct Mgap {
    fc: Linear,
    mlp: [Linear; 2],
}

#[derive(Clone, Debug)]
pub struct MgapOutput {
    /// `q × 1` pooling weights.
    pub weights: Var,
    pub pooled: Var,
    /// `1 × 2` (p'_r, p'_f).
    pub probs: Var,
}

impl Mgap {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Mgap {
        let g = ParamGroup::Mgap;
        let std = 1.0 / (d as f64).sqrt();
        Mgap {
            fc: Linear::new(store, rng, &format!("{name}.fc"), d, 1, std, true, g, true),
            mlp: [
                Linear::new(store, rng, &format!("{name}.mlp0"), d, d, std, true, g, true),
                Linear::new(store, rng, &format!("{name}.mlp1"), d, 2, std, true, g, true),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, tokens: Var) -> Result<MgapOutput> {
        if tape.rows(tokens) == 0 {
            return Err(Error::Data("attention pooling over zero tokens".into()));
        }
        let scores = self.fc.forward(tape, tokens)?;
        let weights = tape.softmax(scores, Axis::Rows);
        let wt = tape.transpose(weights);
        let pooled = tape.matmul(wt, tokens)?;
        let h = self.mlp[0].forward(tape, pooled)?;
        let h = tape.gelu(h);
        let logits = self.mlp[1].forward(tape, h)?;
        let probs = tape.softmax(logits, Axis::Cols);
        Ok(MgapOutput {
            weights,
            pooled,
            probs,
        })
    }
}

/// `−[(1−y)·ln p_r + y·ln p_f]` on a `1 × 2` probability pair, clamped.
pub fn binary_ce(tape: &mut Tape, probs: Var, y: f64) -> Result<Var> {
    let logp = tape.log_clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let s = tape.weighted_sum(logp, &[1.0 - y, y])?;
    Ok(tape.scale(s, -1.0))
}

/// APG: binary cross-entropy on the token-mean detection probabilities.
/// Returns `(mean probs, loss)`.
pub fn apg_loss(tape: &mut Tape, det_probs: Var, y: f64) -> Result<(Var, Var)> {
    let mean = tape.mean_rows(det_probs)?;
    let loss = binary_ce(tape, mean, y)?;
    Ok((mean, loss))
}

/// ACL: binary cross-entropy on the pooled head's confidences.
pub fn acl_loss(tape: &mut Tape, mgap_probs: Var, y: f64) -> Result<Var> {
    binary_ce(tape, mgap_probs, y)
}

/// Mean of whichever of APG and ACL are enabled; `None` if neither is.
pub fn pmoe_loss(tape: &mut Tape, apg: Option<Var>, acl: Option<Var>) -> Result<Option<Var>> {
    Ok(match (apg, acl) {
        (Some(a), Some(b)) => {
            let s = tape.add(a, b)?;
            Some(tape.scale(s, 0.5))
        }
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    })
}

/// `Σ_i −p_i ln p_i` over the token-mean attribution probabilities.
pub fn entropy_regularizer(tape: &mut Tape, attr_probs: Var) -> Result<Var> {
    let mean = tape.mean_rows(attr_probs)?;
    let plogp = tape.xlogx(mean);
    let s = tape.sum(plogp);
    Ok(tape.scale(s, -1.0))
}

/// Which adapter parts a stage builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StageParts {
    pub detection: bool,
    pub attribution: bool,
    pub mgap: bool,
}

/// One insertion point: independent Detection, Attribution and pooling
/// parameters.
#[derive(Clone, Debug)]
pub struct PmoeStage {
    pub detection: Option<MoeBlock>,
    pub attribution: Option<MoeBlock>,
    pub mgap: Option<Mgap>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub detection: Option<MoeOutput>,
    pub attribution: Option<MoeOutput>,
    pub mgap: Option<MgapOutput>,
    /// `Ā^attr` (or the last enabled transform's output).
    pub out: Var,
}

impl PmoeStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, parts: StageParts) -> PmoeStage {
        PmoeStage {
            detection: parts
                .detection
                .then(|| MoeBlock::new(store, rng, &format!("{name}.detection"), d, heads, 2, ParamGroup::Detection)),
            attribution: parts
                .attribution
                .then(|| MoeBlock::new(store, rng, &format!("{name}.attribution"), d, heads, 4, ParamGroup::Attribution)),
            mgap: parts.mgap.then(|| Mgap::new(store, rng, &format!("{name}.mgap"), d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, tokens: Var, gate_scaling: bool) -> Result<StageOutput> {
        let mut x = tokens;
        let detection = match &self.detection {
            Some(b) => {
                let o = b.forward(tape, x, gate_scaling)?;
                x = o.out;
                Some(o)
            }
            None => None,
        };
        let attribution = match &self.attribution {
            Some(b) => {
                let o = b.forward(tape, x, gate_scaling)?;
                x = o.out;
                Some(o)
            }
            None => None,
        };
        let mgap = match &self.mgap {
            Some(m) => Some(m.forward(tape, x)?),
            None => None,
        };
        Ok(StageOutput {
            detection,
            attribution,
            mgap,
            out: x,
        })
    }
}

/// Learnable artifact tokens, `q × d`, initialised `N(0, 0.02²)`.
pub fn artifact_tokens(store: &mut ParamStore, rng: &mut impl Rng, q: usize, d: usize) -> Result<ParamId> {
    if q == 0 {
        return Err(Error::Config("artifact token count must be at least 1".into()));
    }
    Ok(store.add("artifact_tokens", normal(rng, vec![q, d], 0.02), ParamGroup::Artifact, true, true))
}

/// Runs `f_c ⊗ A` through the first `upto` layers and splits it back.
/// Without artifact tokens only `f_c` is contextualized.
pub fn contextualize_with_artifacts(
    tape: &mut Tape,
    backbone: &Backbone,
    f_c: Var,
    artifacts: Option<Var>,
    upto: usize,
) -> Result<(Var, Option<Var>)> {
    let Some(a) = artifacts else {
        return Ok((backbone.forward_early(tape, f_c, upto)?, None));
    };
    if tape.cols(a) != tape.cols(f_c) {
        return Err(shape_err!("artifact width {} vs stream width {}", tape.cols(a), tape.cols(f_c)));
    }
    let t_c = tape.rows(f_c);
    let q = tape.rows(a);
    let joint = tape.concat_rows(&[f_c, a])?;
    let out = backbone.forward_early(tape, joint, upto)?;
    let f = tape.slice_rows(out, 0, t_c)?;
    let a = tape.slice_rows(out, t_c, q)?;
    Ok((f, Some(a)))
}

#[cfg(test)]
mod tests;
