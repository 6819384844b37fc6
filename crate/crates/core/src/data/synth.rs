//! Synthetic gloss videos: a soft blob performing one motion primitive per
//! gloss, with a short cross-fade at every join.

use std::f64::consts::TAU;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Motion primitives, one per gloss id (`id = index + 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Right,
    Left,
    Up,
    Down,
    DiagDownRight,
    DiagUpLeft,
    Orbit,
    Expand,
    Contract,
    Blink,
}

impl Primitive {
    pub const ALL: [Primitive; 10] = [
        Primitive::Right,
        Primitive::Left,
        Primitive::Up,
        Primitive::Down,
        Primitive::DiagDownRight,
        Primitive::DiagUpLeft,
        Primitive::Orbit,
        Primitive::Expand,
        Primitive::Contract,
        Primitive::Blink,
    ];

    /// Gloss id `1..=10`.
    pub fn from_gloss(id: usize) -> Option<Primitive> {
        id.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Right => "right",
            Primitive::Left => "left",
            Primitive::Up => "up",
            Primitive::Down => "down",
            Primitive::DiagDownRight => "diag_down_right",
            Primitive::DiagUpLeft => "diag_up_left",
            Primitive::Orbit => "orbit",
            Primitive::Expand => "expand",
            Primitive::Contract => "contract",
            Primitive::Blink => "blink",
        }
    }
}

/// Everything needed to render one gloss segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlossRender {
    pub primitive: Primitive,
    pub duration: usize,
    /// Blob centre at the first frame, in pixels `(x, y)`.
    pub start: (f64, f64),
    pub color: [f64; 3],
}

/// Travel distance of the translating primitives as a fraction of the side.
const TRAVEL: f64 = 0.3;
/// Base blob radius (Gaussian sigma) as a fraction of the side.
const SIGMA: f64 = 0.09;

impl GlossRender {
    /// Blob centre, sigma and brightness at progress `u` in `[0, 1]`.
    fn pose(&self, side: f64, u: f64) -> (f64, f64, f64, f64) {
        let (x0, y0) = self.start;
        let d = TRAVEL * side;
        let s = SIGMA * side;
        match self.primitive {
            Primitive::Right => (x0 + d * u, y0, s, 1.0),
            Primitive::Left => (x0 - d * u, y0, s, 1.0),
            Primitive::Up => (x0, y0 - d * u, s, 1.0),
            Primitive::Down => (x0, y0 + d * u, s, 1.0),
            Primitive::DiagDownRight => (x0 + d * u, y0 + d * u, s, 1.0),
            Primitive::DiagUpLeft => (x0 - d * u, y0 - d * u, s, 1.0),
            Primitive::Orbit => {
                // starts at the top of a circle and goes round once clockwise
                let r = d / 2.0;
                let a = TAU * u;
                (x0 + r * a.sin(), y0 + r - r * a.cos(), s, 1.0)
            }
            Primitive::Expand => (x0, y0, s * (1.0 + u), 1.0),
            Primitive::Contract => (x0, y0, s * (2.0 - u), 1.0),
            Primitive::Blink => (x0, y0, s, (2.0 * u - 1.0).abs()),
        }
    }

    /// Renders `[duration, 3, side, side]` row-major frames in `[0, 1]`.
    pub fn render(&self, side: usize) -> Vec<f32> {
        let plane = side * side;
        let mut out = vec![0.0f32; self.duration * CHANNELS * plane];
        for t in 0..self.duration {
            let u = if self.duration > 1 {
                t as f64 / (self.duration - 1) as f64
            } else {
                0.0
            };
            let (cx, cy, sigma, level) = self.pose(side as f64, u);
            let inv = 1.0 / (2.0 * sigma * sigma);
            let frame = &mut out[t * CHANNELS * plane..(t + 1) * CHANNELS * plane];
            for y in 0..side {
                let dy = y as f64 + 0.5 - cy;
                for x in 0..side {
                    let dx = x as f64 + 0.5 - cx;
                    let v = level * (-(dx * dx + dy * dy) * inv).exp();
                    for c in 0..CHANNELS {
                        frame[c * plane + y * side + x] = (self.color[c] * v).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        out
    }

    /// Start positions that keep the blob centre inside the frame for the
    /// whole primitive.
    fn start_range(primitive: Primitive, side: f64) -> ((f64, f64), (f64, f64)) {
        let d = TRAVEL * side;
        let m = 0.2 * side;
        let (lo, hi) = (m, side - m);
        match primitive {
            Primitive::Right => ((lo, hi - d), (lo, hi)),
            Primitive::Left => ((lo + d, hi), (lo, hi)),
            Primitive::Up => ((lo, hi), (lo + d, hi)),
            Primitive::Down => ((lo, hi), (lo, hi - d)),
            Primitive::DiagDownRight => ((lo, hi - d), (lo, hi - d)),
            Primitive::DiagUpLeft => ((lo + d, hi), (lo + d, hi)),
            Primitive::Orbit => ((lo + d / 2.0, hi - d / 2.0), (lo, hi - d)),
            Primitive::Expand | Primitive::Contract | Primitive::Blink => ((lo, hi), (lo, hi)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub train: usize,
    pub dev: usize,
    /// Number of glosses `G` (at most 10).
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Side of the square frames before cropping.
    pub resolution: usize,
    /// Frames blended at the start of every gloss after the first.
    pub crossfade: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 400,
            dev: 50,
            vocab: 10,
            min_len: 2,
            max_len: 5,
            min_duration: 8,
            max_duration: 16,
            resolution: 40,
            crossfade: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// TOML text with any subset of the fields; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 2 || self.vocab > Primitive::ALL.len() {
            return bad(format!("vocab {} must be in 2..={}", self.vocab, Primitive::ALL.len()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("label length range {}..={}", self.min_len, self.max_len));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!("duration range {}..={}", self.min_duration, self.max_duration));
        }
        if self.crossfade >= self.min_duration {
            return bad(format!(
                "crossfade {} must be shorter than the minimum duration {}",
                self.crossfade, self.min_duration
            ));
        }
        if self.resolution == 0 || self.resolution % 8 != 0 {
            return bad(format!("resolution {} must be a positive multiple of 8", self.resolution));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a stream keyed by a sequence of integers.
pub fn stream_seed(keys: &[u64]) -> u64 {
    keys.iter().fold(0x6D61_6D66_7364_u64, |acc, &k| mix(acc ^ mix(k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: Tensor,
    pub label: Vec<usize>,
    /// `[start, end)` frame range of every gloss (diagnostics only).
    pub segments: Vec<(usize, usize)>,
    pub glosses: Vec<GlossRender>,
}

/// Draws the gloss plan of sample `index`. Adjacent glosses always differ.
pub fn plan_sample(spec: &SynthSpec, split: Split, index: usize) -> Vec<GlossRender> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[spec.seed, split.tag(), index as u64]));
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let side = spec.resolution as f64;
    let color = [
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
    ];
    let mut plan = Vec::with_capacity(len);
    let mut prev = 0;
    for _ in 0..len {
        let mut id = rng.random_range(1..=spec.vocab);
        while id == prev {
            id = rng.random_range(1..=spec.vocab);
        }
        prev = id;
        let primitive = Primitive::from_gloss(id).expect("validated vocab");
        let duration = rng.random_range(spec.min_duration..=spec.max_duration);
        let ((x0, x1), (y0, y1)) = GlossRender::start_range(primitive, side);
        let start = (rng.random_range(x0..=x1), rng.random_range(y0..=y1));
        plan.push(GlossRender {
            primitive,
            duration,
            start,
            color,
        });
    }
    plan
}

/// Concatenates rendered segments; the first `crossfade` frames of every
/// segment after the first are blended with the previous segment's last frame.
pub fn compose(plan: &[GlossRender], side: usize, crossfade: usize) -> (Tensor, Vec<(usize, usize)>) {
    let frame = CHANNELS * side * side;
    let total: usize = plan.iter().map(|g| g.duration).sum();
    let mut data = Vec::with_capacity(total * frame);
    let mut segments = Vec::with_capacity(plan.len());
    for (k, g) in plan.iter().enumerate() {
        let start = data.len() / frame;
        let seg = g.render(side);
        if k > 0 && crossfade > 0 {
            let last = data[(start - 1) * frame..start * frame].to_vec();
            for f in 0..crossfade.min(g.duration) {
                let w = (f + 1) as f64 / (crossfade + 1) as f64;
                for (i, &prev) in last.iter().enumerate() {
                    let cur = seg[f * frame + i] as f64;
                    data.push((w * cur + (1.0 - w) * prev as f64) as f32);
                }
            }
            data.extend_from_slice(&seg[crossfade.min(g.duration) * frame..]);
        } else {
            data.extend_from_slice(&seg);
        }
        segments.push((start, start + g.duration));
    }
    let video = Tensor::new(vec![total, CHANNELS, side, side], data).expect("frame count matches");
    (video, segments)
}

pub fn generate_sample(spec: &SynthSpec, split: Split, index: usize) -> Sample {
    let glosses = plan_sample(spec, split, index);
    let (video, segments) = compose(&glosses, spec.resolution, spec.crossfade);
    let label = glosses
        .iter()
        .map(|g| Primitive::ALL.iter().position(|&p| p == g.primitive).expect("known") + 1)
        .collect();
    Sample {
        id: format!("{}_{index:05}", split.name()),
        video,
        label,
        segments,
        glosses,
    }
}
