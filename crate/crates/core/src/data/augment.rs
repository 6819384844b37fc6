//! Training-time augmentation (random crop, horizontal flip, temporal
//! stretch) and the inter-frame difference map.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Side of the square crop fed to the model.
    pub crop: usize,
    pub flip_prob: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: 32,
            flip_prob: 0.5,
            stretch_min: 0.8,
            stretch_max: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.stretch_min > 0.0 && self.stretch_min <= 1.0 && self.stretch_max >= 1.0)
            || !self.stretch_max.is_finite()
        {
            return Err(Error::Config(format!(
                "stretch range [{}, {}] must contain 1",
                self.stretch_min, self.stretch_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Concrete augmentation decisions for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub offset: (usize, usize),
    pub flip: bool,
    pub stretch: f64,
}

fn check_video(op: &'static str, video: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *video.dims() {
        [t, c, h, w] => Ok((t, c, h, w)),
        ref d => Err(Error::shape(op, format!("expected [T, C, H, W], got {d:?}"))),
    }
}

/// `[T, C, H, W]` to `[T, C, size, size]` starting at `(top, left)`.
pub fn crop(video: &Tensor, size: usize, top: usize, left: usize) -> Result<Tensor> {
    let (t, c, h, w) = check_video("crop", video)?;
    if top + size > h || left + size > w {
        return Err(Error::invalid(
            "crop",
            format!("{size}x{size} crop at ({top}, {left}) exceeds {h}x{w} frame"),
        ));
    }
    let mut data = Vec::with_capacity(t * c * size * size);
    let src = video.data();
    for plane in 0..t * c {
        for y in top..top + size {
            let row = (plane * h + y) * w;
            data.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Tensor::new(vec![t, c, size, size], data)
}

/// Mirrors every frame left-right.
pub fn flip_horizontal(video: &Tensor) -> Result<Tensor> {
    let (_, _, _, w) = check_video("flip_horizontal", video)?;
    let mut data = video.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(video.dims().to_vec(), data)
}

/// Output length for stretch factor `u`, rounded and clamped to
/// `[ceil(0.8 T), floor(1.2 T)]`.
pub fn stretched_len(frames: usize, u: f64) -> usize {
    let lo = (4 * frames).div_ceil(5);
    let hi = 6 * frames / 5;
    ((u * frames as f64).round() as usize).clamp(lo, hi)
}

/// Source frame of every output frame: `round(t' * T / T')` (half up),
/// clamped to the last frame.
pub fn stretch_indices(frames: usize, out: usize) -> Vec<usize> {
    (0..out)
        .map(|tp| ((2 * tp * frames + out) / (2 * out)).min(frames - 1))
        .collect()
}

/// Nearest-frame temporal resampling to `out` frames.
pub fn resample(video: &Tensor, out: usize) -> Result<Tensor> {
    let (t, c, h, w) = check_video("resample", video)?;
    if t == 0 || out == 0 {
        return Err(Error::invalid("resample", "empty video"));
    }
    let frame = c * h * w;
    let mut data = Vec::with_capacity(out * frame);
    for s in stretch_indices(t, out) {
        data.extend_from_slice(&video.data()[s * frame..(s + 1) * frame]);
    }
    Tensor::new(vec![out, c, h, w], data)
}

/// Draws crop offset, flip and stretch for a `[T, C, H, W]` video.
pub fn draw<R: RngExt + ?Sized>(
    dims: &[usize],
    cfg: &AugmentConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<AugmentDraw> {
    cfg.validate()?;
    let (h, w) = (dims[2], dims[3]);
    if cfg.crop > h || cfg.crop > w {
        return Err(Error::invalid(
            "augment",
            format!("crop {} larger than {h}x{w} frame", cfg.crop),
        ));
    }
    Ok(match mode {
        Mode::Eval => AugmentDraw {
            offset: ((h - cfg.crop) / 2, (w - cfg.crop) / 2),
            flip: false,
            stretch: 1.0,
        },
        Mode::Train => {
            let top = rng.random_range(0..=h - cfg.crop);
            let left = rng.random_range(0..=w - cfg.crop);
            // a zero probability consumes no draw, so it is identical to no flipping
            let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
            let stretch = if cfg.stretch_min < cfg.stretch_max {
                rng.random_range(cfg.stretch_min..=cfg.stretch_max)
            } else {
                cfg.stretch_min
            };
            AugmentDraw {
                offset: (top, left),
                flip,
                stretch,
            }
        }
    })
}

pub fn apply(video: &Tensor, cfg: &AugmentConfig, d: &AugmentDraw) -> Result<Tensor> {
    let mut v = crop(video, cfg.crop, d.offset.0, d.offset.1)?;
    if d.flip {
        v = flip_horizontal(&v)?;
    }
    let t = v.dims()[0];
    let out = stretched_len(t, d.stretch);
    if out != t {
        v = resample(&v, out)?;
    }
    Ok(v)
}

/// Train mode: random crop, flip with `flip_prob`, stretch in
/// `[stretch_min, stretch_max]`. Eval mode: centre crop only.
pub fn augment<R: RngExt + ?Sized>(video: &Tensor, cfg: &AugmentConfig, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_video("augment", video)?;
    let d = draw(video.dims(), cfg, mode, rng)?;
    apply(video, cfg, &d)
}

/// `D_t = mean_c |x_{t+1} - x_t|`, scaled so the global maximum is 1
/// (an all-zero map stays zero). Output `[T - 1, H, W]`.
pub fn frame_difference_map(video: &Tensor) -> Result<Tensor> {
    let (t, c, h, w) = check_video("frame_difference_map", video)?;
    if t < 2 {
        return Err(Error::invalid("frame_difference_map", format!("need at least 2 frames, got {t}")));
    }
    let plane = h * w;
    let x = video.data();
    let mut out = vec![0.0f64; (t - 1) * plane];
    for f in 0..t - 1 {
        for ch in 0..c {
            let a = &x[(f * c + ch) * plane..][..plane];
            let b = &x[((f + 1) * c + ch) * plane..][..plane];
            for (o, (&p, &q)) in out[f * plane..(f + 1) * plane].iter_mut().zip(a.iter().zip(b)) {
                *o += (q as f64 - p as f64).abs();
            }
        }
    }
    let max = out.iter().fold(0.0f64, |m, &v| m.max(v / c as f64));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data: Vec<f32> = out.iter().map(|&v| (v / c as f64 * scale) as f32).collect();
    Tensor::new(vec![t - 1, h, w], data)
}
