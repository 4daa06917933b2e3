use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::TEXT_EVENT_BASE;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// `y` in the binary cross-entropy terms: 0 for real, 1 for fake.
    pub fn y(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self.y() as usize
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Real
        } else {
            Label::Fake
        }
    }
}

/// The four news-video scenarios. Index order matches the attribution
/// experts: real, fake video, fake text, fake both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    Real,
    FakeVideo,
    FakeText,
    FakeBoth,
}

impl Manipulation {
    pub const ALL: [Manipulation; 4] = [
        Manipulation::Real,
        Manipulation::FakeVideo,
        Manipulation::FakeText,
        Manipulation::FakeBoth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> Label {
        match self {
            Manipulation::Real => Label::Real,
            _ => Label::Fake,
        }
    }

    fn touches_video(self) -> bool {
        matches!(self, Manipulation::FakeVideo | Manipulation::FakeBoth)
    }

    fn touches_text(self) -> bool {
        matches!(self, Manipulation::FakeText | Manipulation::FakeBoth)
    }
}

/// One synthetic news video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub timestamp: u64,
    pub event_id: usize,
    pub description: Vec<u32>,
    pub frames: Vec<Vec<u32>>,
    pub label: Label,
    pub manipulation: Manipulation,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of the synthetic generator.
///
/// Event `e` owns the text ids `TEXT_EVENT_BASE + e·w .. + w` and the visual
/// ids `e·w .. e·w + w`, where `w = signature_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_events: usize,
    pub n_samples: usize,
    /// Probabilities of real, fake video, fake text, fake both.
    pub mix: [f64; 4],
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub frames: usize,
    pub patches_per_frame: usize,
    pub description_len: usize,
    pub event_len: usize,
    pub signature_width: usize,
    /// Fraction of a stream's tokens replaced by a manipulation.
    pub corruption_strength: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_events: 4,
            n_samples: 2000,
            mix: [0.5, 0.17, 0.17, 0.16],
            text_vocab: 256,
            visual_vocab: 256,
            frames: 8,
            patches_per_frame: 4,
            description_len: 8,
            event_len: 2,
            signature_width: 4,
            corruption_strength: 0.5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_events < 2 {
            return Err(Error::Config(format!(
                "need at least 2 events for contrastive negatives, got {}",
                self.n_events
            )));
        }
        let total: f64 = self.mix.iter().sum();
        if self.mix.iter().any(|p| *p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix {:?} is not a distribution", self.mix)));
        }
        if !(self.corruption_strength > 0.0 && self.corruption_strength <= 1.0) {
            return Err(Error::Config(format!(
                "corruption strength {} outside (0, 1]",
                self.corruption_strength
            )));
        }
        if self.signature_width == 0 || self.frames == 0 || self.patches_per_frame == 0 {
            return Err(Error::Config("signature width, frames and patches must be positive".into()));
        }
        if self.description_len == 0 {
            return Err(Error::Config("description length must be positive".into()));
        }
        let w = self.signature_width;
        if TEXT_EVENT_BASE as usize + self.n_events * w > self.text_vocab {
            return Err(Error::Config(format!(
                "{} events of width {w} do not fit a text vocabulary of {}",
                self.n_events, self.text_vocab
            )));
        }
        if self.n_events * w > self.visual_vocab {
            return Err(Error::Config(format!(
                "{} events of width {w} do not fit a visual vocabulary of {}",
                self.n_events, self.visual_vocab
            )));
        }
        Ok(())
    }

    pub fn text_range(&self, event: usize) -> std::ops::Range<u32> {
        let w = self.signature_width as u32;
        let start = TEXT_EVENT_BASE + event as u32 * w;
        start..start + w
    }

    pub fn visual_range(&self, event: usize) -> std::ops::Range<u32> {
        let w = self.signature_width as u32;
        let start = event as u32 * w;
        start..start + w
    }

    /// Tokens filling the prompt's event slot.
    pub fn event_tokens(&self, event: usize) -> Vec<u32> {
        let r = self.text_range(event);
        (0..self.event_len)
            .map(|i| r.start + (i % self.signature_width) as u32)
            .collect()
    }

    /// Events whose text range contains one of `tokens`.
    pub fn text_signature(&self, tokens: &[u32]) -> BTreeSet<usize> {
        let w = self.signature_width as u32;
        tokens
            .iter()
            .filter(|&&t| t >= TEXT_EVENT_BASE)
            .map(|&t| ((t - TEXT_EVENT_BASE) / w) as usize)
            .filter(|&e| e < self.n_events)
            .collect()
    }

    pub fn visual_signature(&self, frames: &[Vec<u32>]) -> BTreeSet<usize> {
        let w = self.signature_width as u32;
        frames
            .iter()
            .flatten()
            .map(|&t| (t / w) as usize)
            .filter(|&e| e < self.n_events)
            .collect()
    }

    /// Rule-based classifier reading signatures only. On generated data it
    /// recovers the manipulation type exactly.
    pub fn oracle_manipulation(&self, sample: &Sample) -> Manipulation {
        let own = BTreeSet::from([sample.event_id]);
        let text_ok = self.text_signature(&sample.description) == own;
        let video_ok = self.visual_signature(&sample.frames) == own;
        match (video_ok, text_ok) {
            (true, true) => Manipulation::Real,
            (false, true) => Manipulation::FakeVideo,
            (true, false) => Manipulation::FakeText,
            (false, false) => Manipulation::FakeBoth,
        }
    }

    fn draw(rng: &mut impl Rng, range: std::ops::Range<u32>) -> u32 {
        rng.random_range(range)
    }

    fn other_event(&self, rng: &mut impl Rng, event: usize) -> usize {
        let k = rng.random_range(0..self.n_events - 1);
        if k >= event {
            k + 1
        } else {
            k
        }
    }

    fn corrupt(&self, rng: &mut impl Rng, tokens: &mut [u32], range: std::ops::Range<u32>) {
        let n = tokens.len();
        if n == 0 {
            return;
        }
        let count = ((self.corruption_strength * n as f64).round() as usize).clamp(1, n);
        for pos in sample_indices(rng, n, count) {
            tokens[pos] = Self::draw(rng, range.clone());
        }
    }
}

/// Turns a real sample into the given manipulation scenario.
///
/// `FakeVideo`/`FakeText` overwrite the configured fraction of frame or
/// description tokens with tokens of a uniformly chosen different event;
/// `FakeBoth` does both with independent choices.
pub fn apply_manipulation(
    sample: &Sample,
    kind: Manipulation,
    spec: &CorpusSpec,
    rng: &mut impl Rng,
) -> Result<Sample> {
    if sample.manipulation != Manipulation::Real {
        return Err(Error::Contract(format!(
            "sample {} is already manipulated",
            sample.id
        )));
    }
    let mut out = sample.clone();
    if kind == Manipulation::Real {
        return Ok(out);
    }
    if kind.touches_video() {
        let other = spec.other_event(rng, sample.event_id);
        let mut flat: Vec<u32> = out.frames.concat();
        spec.corrupt(rng, &mut flat, spec.visual_range(other));
        let per = spec.patches_per_frame.max(1);
        out.frames = flat.chunks(per).map(<[u32]>::to_vec).collect();
    }
    if kind.touches_text() {
        let other = spec.other_event(rng, sample.event_id);
        spec.corrupt(rng, &mut out.description, spec.text_range(other));
    }
    out.manipulation = kind;
    out.label = kind.label();
    Ok(out)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let event = rng.random_range(0..spec.n_events);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut kind = Manipulation::FakeBoth;
        for (m, p) in Manipulation::ALL.iter().zip(spec.mix) {
            acc += p;
            if u < acc {
                kind = *m;
                break;
            }
        }
        let description = (0..spec.description_len)
            .map(|_| CorpusSpec::draw(&mut rng, spec.text_range(event)))
            .collect();
        let frames = (0..spec.frames)
            .map(|_| {
                (0..spec.patches_per_frame)
                    .map(|_| CorpusSpec::draw(&mut rng, spec.visual_range(event)))
                    .collect()
            })
            .collect();
        let real = Sample {
            id: format!("s{i:06}"),
            timestamp: i as u64,
            event_id: event,
            description,
            frames,
            label: Label::Real,
            manipulation: Manipulation::Real,
        };
        samples.push(apply_manipulation(&real, kind, spec, &mut rng)?);
    }
    Ok(Corpus { samples })
}
