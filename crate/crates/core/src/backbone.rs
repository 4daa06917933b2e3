//! A small frozen decoder-only transformer standing in for a pretrained
//! vision-language model.
//!
//! The visual path is a token embedding followed by a two-layer connector.
//! Text gets a token embedding plus sinusoidal positions. Layers are pre-LN
//! blocks with causal multi-head attention and a GELU MLP; layer indices in
//! this API are 1-based, as in "the first `l` layers". A trainable two-way
//! head reads the final position.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{normal, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub split_layer: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub frames: usize,
    pub patches_per_frame: usize,
    /// 0 disables low-rank adapters.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Layers after which an adapter stage runs, strictly increasing.
    pub insert_layers: Vec<usize>,
    pub max_context: usize,
    /// Multiplier on the `1/√fan_in` init of frozen projection weights.
    pub init_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 8,
            split_layer: 3,
            hidden_dim: 64,
            heads: 4,
            text_vocab: 256,
            visual_vocab: 256,
            frames: 8,
            patches_per_frame: 4,
            lora_rank: 8,
            lora_alpha: 32.0,
            insert_layers: vec![3],
            max_context: 128,
            init_scale: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_layer < 1 || self.split_layer >= self.depth {
            return bad(format!(
                "split layer {} must lie in [1, {})",
                self.split_layer, self.depth
            ));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.lora_rank > self.hidden_dim {
            return bad(format!(
                "lora rank {} exceeds hidden dim {}",
                self.lora_rank, self.hidden_dim
            ));
        }
        if self.frames == 0 || self.patches_per_frame == 0 {
            return bad("frames and patches per frame must be positive".into());
        }
        for (i, &layer) in self.insert_layers.iter().enumerate() {
            if layer < 1 || layer >= self.depth {
                return bad(format!("insert layer {layer} must lie in [1, {})", self.depth));
            }
            if i > 0 && layer <= self.insert_layers[i - 1] {
                return bad("insert layers must be strictly increasing".into());
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad(format!("init scale {} is invalid", self.init_scale));
        }
        Ok(())
    }

    pub fn visual_len(&self) -> usize {
        self.frames * self.patches_per_frame
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// Trainable low-rank delta `scale · (x·down)·up` on one projection.
#[derive(Clone, Debug)]
pub struct Lora {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    /// Query, key, value and output projections, in that order.
    proj: [Linear; 4],
    lora: Option<[Lora; 4]>,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    text_embed: ParamId,
    visual_embed: ParamId,
    connector: [Linear; 2],
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
}

const PROJ_NAMES: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl Backbone {
    /// Registers a randomly initialised backbone. Everything is frozen except
    /// the answer head.
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Backbone> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let g = ParamGroup::Backbone;
        let std = cfg.init_scale / (d as f64).sqrt();
        let text_embed = store.add("text_embed", normal(rng, vec![cfg.text_vocab, d], 1.0), g, false, true);
        let visual_embed = store.add("visual_embed", normal(rng, vec![cfg.visual_vocab, d], 1.0), g, false, true);
        let connector = [
            Linear::new(store, rng, "connector.0", d, d, std, true, g, false),
            Linear::new(store, rng, "connector.1", d, d, std, true, g, false),
        ];
        let mut blocks = Vec::with_capacity(cfg.depth);
        for layer in 1..=cfg.depth {
            let name = |part: &str| format!("layer{layer}.{part}");
            let proj = PROJ_NAMES.map(|p| Linear::new(store, rng, &name(p), d, d, std, false, g, false));
            blocks.push(Block {
                ln1: LayerNorm::new(store, &name("ln1"), d, g, false),
                proj,
                lora: None,
                ln2: LayerNorm::new(store, &name("ln2"), d, g, false),
                fc1: Linear::new(store, rng, &name("fc1"), d, 4 * d, std, true, g, false),
                fc2: Linear::new(store, rng, &name("fc2"), 4 * d, d, cfg.init_scale / (4.0 * d as f64).sqrt(), true, g, false),
            });
        }
        let final_ln = LayerNorm::new(store, "final_ln", d, g, false);
        let head = Linear::new(store, rng, "answer_head", d, 2, 0.02, true, ParamGroup::Head, true);
        Ok(Backbone {
            cfg: cfg.clone(),
            text_embed,
            visual_embed,
            connector,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.lora.is_some())
    }

    /// Adds rank-`r` adapters to every attention projection, scaled by
    /// `alpha / r`. `up` starts at zero so the effective weights are unchanged.
    pub fn apply_lora(&mut self, store: &mut ParamStore, rng: &mut impl Rng, r: usize, alpha: f64) -> Result<()> {
        let d = self.cfg.hidden_dim;
        if r == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if r > d {
            return Err(Error::Config(format!("lora rank {r} exceeds hidden dim {d}")));
        }
        let scale = alpha / r as f64;
        let std = 1.0 / (d as f64).sqrt();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let layer = i + 1;
            block.lora = Some(PROJ_NAMES.map(|p| Lora {
                down: store.add(
                    format!("layer{layer}.{p}.lora_down"),
                    normal(rng, vec![d, r], std),
                    ParamGroup::Lora,
                    true,
                    true,
                ),
                up: store.add(
                    format!("layer{layer}.{p}.lora_up"),
                    crate::autodiff::Tensor::zeros(vec![r, d]),
                    ParamGroup::Lora,
                    true,
                    true,
                ),
                scale,
            }));
        }
        Ok(())
    }

    /// Every adapter factor, layer by layer.
    pub fn lora_params(&self) -> Vec<&Lora> {
        self.blocks
            .iter()
            .filter_map(|b| b.lora.as_ref())
            .flat_map(|l| l.iter())
            .collect()
    }

    pub fn encode_visual(&self, tape: &mut Tape, frames: &[Vec<u32>]) -> Result<Var> {
        if frames.len() != self.cfg.frames {
            return Err(Error::Data(format!(
                "expected {} frames, got {}",
                self.cfg.frames,
                frames.len()
            )));
        }
        let mut ids = Vec::with_capacity(self.cfg.visual_len());
        for (i, f) in frames.iter().enumerate() {
            if f.len() != self.cfg.patches_per_frame {
                return Err(Error::Data(format!(
                    "frame {i} has {} patches, expected {}",
                    f.len(),
                    self.cfg.patches_per_frame
                )));
            }
            ids.extend(f.iter().map(|&t| t as usize));
        }
        let table = tape.param(self.visual_embed);
        let x = tape.gather_rows(table, &ids)?;
        let h = self.connector[0].forward(tape, x)?;
        let h = tape.gelu(h);
        self.connector[1].forward(tape, h)
    }

    pub fn embed_text(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let table = tape.param(self.text_embed);
        let x = tape.gather_rows(table, &ids)?;
        let pe = tape.constant(ids.len(), self.cfg.hidden_dim, positional(ids.len(), self.cfg.hidden_dim))?;
        tape.add(x, pe)
    }

    /// Runs layers `first..=last`.
    pub fn forward_range(&self, tape: &mut Tape, mut x: Var, first: usize, last: usize) -> Result<Var> {
        if first < 1 || last > self.cfg.depth {
            return Err(Error::Config(format!(
                "layers {first}..={last} outside 1..={}",
                self.cfg.depth
            )));
        }
        for block in &self.blocks[first - 1..last] {
            x = self.block_forward(tape, block, x)?;
        }
        Ok(x)
    }

    pub fn forward_early(&self, tape: &mut Tape, x: Var, upto: usize) -> Result<Var> {
        if upto < 1 || upto > self.cfg.depth {
            return Err(Error::Config(format!(
                "cannot run the first {upto} of {} layers",
                self.cfg.depth
            )));
        }
        self.forward_range(tape, x, 1, upto)
    }

    /// Final layer norm and answer head at the last position; `1 × 2` logits
    /// ordered (REAL, FAKE).
    pub fn decode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.rows(x);
        if n == 0 {
            return Err(Error::Data("cannot decode an empty sequence".into()));
        }
        let last = tape.slice_rows(x, n - 1, 1)?;
        let h = self.final_ln.forward(tape, last)?;
        self.head.forward(tape, h)
    }

    /// Appends the adapter tokens (if any) to the stream contextualized
    /// through the split layer, runs the remaining layers and decodes.
    pub fn forward_late_and_decode(&self, tape: &mut Tape, f_c: Var, adapter: Option<Var>) -> Result<Var> {
        let x = match adapter {
            Some(a) => tape.concat_rows(&[f_c, a])?,
            None => f_c,
        };
        let x = self.forward_range(tape, x, self.cfg.split_layer + 1, self.cfg.depth)?;
        self.decode(tape, x)
    }

    fn project(&self, tape: &mut Tape, block: &Block, which: usize, x: Var) -> Result<Var> {
        let y = block.proj[which].forward(tape, x)?;
        match &block.lora {
            Some(l) => {
                let l = &l[which];
                let down = tape.param(l.down);
                let up = tape.param(l.up);
                let t = tape.matmul(x, down)?;
                let t = tape.matmul(t, up)?;
                let t = tape.scale(t, l.scale);
                tape.add(y, t)
            }
            None => Ok(y),
        }
    }

    fn block_forward(&self, tape: &mut Tape, block: &Block, x: Var) -> Result<Var> {
        let h = block.ln1.forward(tape, x)?;
        let q = self.project(tape, block, 0, h)?;
        let k = self.project(tape, block, 1, h)?;
        let v = self.project(tape, block, 2, h)?;
        let dk = self.cfg.head_dim();
        let inv = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, i * dk, dk)?;
            let kh = tape.slice_cols(k, i * dk, dk)?;
            let vh = tape.slice_cols(v, i * dk, dk)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, inv);
            let p = tape.causal_softmax(s)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let att = self.project(tape, block, 3, att)?;
        let x = tape.add(x, att)?;
        let h = block.ln2.forward(tape, x)?;
        let h = block.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = block.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Sinusoidal position table, `len × d`, row-major.
pub fn positional(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(lora: bool) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BackboneConfig::default();
        let mut bb = Backbone::new(&cfg, &mut store, &mut rng).unwrap();
        if lora {
            bb.apply_lora(&mut store, &mut rng, 8, 32.0).unwrap();
        }
        (store, bb)
    }

    fn frames(seed: u32) -> Vec<Vec<u32>> {
        (0..8).map(|f| (0..4).map(|p| (seed + f * 4 + p) % 256).collect()).collect()
    }

    #[test]
    fn config_validation() {
        let ok = BackboneConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            BackboneConfig { split_layer: 0, ..ok.clone() },
            BackboneConfig { split_layer: 8, ..ok.clone() },
            BackboneConfig { heads: 3, ..ok.clone() },
            BackboneConfig { lora_rank: 65, ..ok.clone() },
            BackboneConfig { insert_layers: vec![8], ..ok.clone() },
            BackboneConfig { insert_layers: vec![3, 2], ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn visual_shape_and_row_independence() {
        let (store, bb) = setup(false);
        let mut tape = Tape::inference(&store);
        let f = frames(0);
        let v = bb.encode_visual(&mut tape, &f).unwrap();
        assert_eq!(tape.shape(v), (32, 64));

        let mut same = f.clone();
        same[1] = same[0].clone();
        let v2 = bb.encode_visual(&mut tape, &same).unwrap();
        for p in 0..4 {
            assert_eq!(tape.row(v2, p), tape.row(v2, 4 + p));
        }

        let mut one = f.clone();
        one[2][1] = 200;
        let v3 = bb.encode_visual(&mut tape, &one).unwrap();
        for r in 0..32 {
            let changed = tape.row(v, r) != tape.row(v3, r);
            assert_eq!(changed, r == 9, "row {r}");
        }
    }

    #[test]
    fn visual_errors() {
        let (store, bb) = setup(false);
        let mut tape = Tape::inference(&store);
        let mut f = frames(0);
        f[0][0] = 256;
        assert!(matches!(bb.encode_visual(&mut tape, &f), Err(Error::Data(_))));
        assert!(matches!(bb.encode_visual(&mut tape, &frames(0)[..7]), Err(Error::Data(_))));
    }

    #[test]
    fn text_embedding() {
        let (store, bb) = setup(false);
        let mut tape = Tape::inference(&store);
        let e = bb.embed_text(&mut tape, &[]).unwrap();
        assert_eq!(tape.shape(e), (0, 64));
        let a = bb.embed_text(&mut tape, &[1, 2, 3, 4, 5]).unwrap();
        let b = bb.embed_text(&mut tape, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(tape.shape(a), (5, 64));
        assert_eq!(tape.value(a), tape.value(b));
        assert!(matches!(bb.embed_text(&mut tape, &[256]), Err(Error::Data(_))));
    }

    #[test]
    fn early_layers_change_values_and_keep_shape() {
        let (store, bb) = setup(false);
        let mut tape = Tape::inference(&store);
        let x = bb.embed_text(&mut tape, &[10, 11, 12]).unwrap();
        let y = bb.forward_early(&mut tape, x, 3).unwrap();
        assert_eq!(tape.shape(y), (3, 64));
        assert_ne!(tape.value(x), tape.value(y));
        assert!(matches!(bb.forward_early(&mut tape, x, 0), Err(Error::Config(_))));
        assert!(matches!(bb.forward_early(&mut tape, x, 9), Err(Error::Config(_))));
    }

    #[test]
    fn split_matches_monolithic_forward() {
        let (store, bb) = setup(true);
        let mut tape = Tape::inference(&store);
        let x = bb.embed_text(&mut tape, &[10, 11, 12, 13]).unwrap();
        let whole = bb.forward_range(&mut tape, x, 1, 8).unwrap();
        let whole = bb.decode(&mut tape, whole).unwrap();
        let early = bb.forward_early(&mut tape, x, 3).unwrap();
        let split = bb.forward_late_and_decode(&mut tape, early, None).unwrap();
        for (a, b) in tape.value(whole).iter().zip(tape.value(split)) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn lora_is_identity_at_init() {
        let (plain_store, plain) = setup(false);
        let (lora_store, lora) = setup(true);
        assert!(!plain.has_lora() && lora.has_lora());
        assert_eq!(lora.lora_params()[0].scale, 4.0);
        let mut t1 = Tape::inference(&plain_store);
        let mut t2 = Tape::inference(&lora_store);
        let prompt = [0, 1, 2, 3, 4, 20, 21, 5, 6, 7];
        let x1 = plain.embed_text(&mut t1, &prompt).unwrap();
        let x1 = plain.forward_early(&mut t1, x1, 3).unwrap();
        let y1 = plain.forward_late_and_decode(&mut t1, x1, None).unwrap();
        let x2 = lora.embed_text(&mut t2, &prompt).unwrap();
        let x2 = lora.forward_early(&mut t2, x2, 3).unwrap();
        let y2 = lora.forward_late_and_decode(&mut t2, x2, None).unwrap();
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn lora_rank_errors() {
        let (mut store, mut bb) = setup(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(bb.apply_lora(&mut store, &mut rng, 0, 32.0).is_err());
        assert!(bb.apply_lora(&mut store, &mut rng, 65, 32.0).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(1, 2, vec![0.3, 0.3]).unwrap();
        let lp = tape.log_softmax_rows(logits);
        assert!((-tape.value(lp)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
