//! Attention-map and difference-map export as binary PGM frames plus CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::augment::{crop, frame_difference_map};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::tensor::Tensor;

/// `round(255 * v)` with halves rounded up, clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary `P5` greymap of a row-major `[h, w]` plane in `[0, 1]`.
pub fn pgm(plane: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| quantize(v)));
    out
}

/// Parses a `P5` greymap written by [`pgm`]: `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |d: &str| Error::format("PGM", d.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    Ok((w, h, pixels.to_vec()))
}

/// Channel mean of a `[C, T, h, w]` map, nearest-upsampled to `[T, side, side]`.
pub fn channel_mean_upsampled(map: &[f64], dims: &[usize], side: usize) -> Result<Vec<f64>> {
    let [c, t, h, w] = *dims else {
        return Err(Error::shape("export", format!("expected [C, T, H, W] map, got {dims:?}")));
    };
    if h == 0 || w == 0 || side % h != 0 || side % w != 0 {
        return Err(Error::shape("export", format!("cannot upsample {h}x{w} to {side}x{side}")));
    }
    let plane = h * w;
    let mut mean = vec![0.0f64; t * plane];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&map[ch * t * plane..(ch + 1) * t * plane]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    let (fy, fx) = (side / h, side / w);
    let mut out = Vec::with_capacity(t * side * side);
    for f in 0..t {
        for y in 0..side {
            for x in 0..side {
                out.push(mean[f * plane + (y / fy) * w + x / fx]);
            }
        }
    }
    Ok(out)
}

fn write_frames(dir: &Path, prefix: &str, frames: &[f64], count: usize, side: usize) -> Result<()> {
    let plane = side * side;
    let mut csv = String::from("frame,y,x,value\n");
    for f in 0..count {
        let data = &frames[f * plane..(f + 1) * plane];
        let path = dir.join(format!("{prefix}_{f:03}.pgm"));
        fs::write(&path, pgm(data, side, side)).map_err(|e| Error::io(&path, e))?;
        for (i, v) in data.iter().enumerate() {
            writeln!(csv, "{f},{},{},{v}", i / side, i % side).expect("string write");
        }
    }
    let path = dir.join(format!("{prefix}.csv"));
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub frames: usize,
    pub side: usize,
    pub map_min: f64,
    pub map_max: f64,
}

/// Writes `attention_TTT.pgm` + `attention.csv` for MAM stage `stage`
/// (1-based) and `difference_TTT.pgm` + `difference.csv` for the same
/// center-cropped video.
pub fn export_attention(model: &Model, video: &Tensor, stage: usize, out: &Path) -> Result<ExportSummary> {
    let count = model.config().backbone.mam_count;
    if stage == 0 || stage > count {
        return Err(Error::Config(format!(
            "stage {stage} has no motor attention block (gated stages: 1..={count})"
        )));
    }
    let side = model.config().backbone.resolution;
    let &[t, _, h, w] = video.dims() else {
        return Err(Error::shape("export_attention", format!("expected [T, 3, H, W], got {:?}", video.dims())));
    };
    if h < side || w < side {
        return Err(Error::invalid("export_attention", format!("{h}x{w} video smaller than model input {side}")));
    }
    let video = crop(video, side, (h - side) / 2, (w - side) / 2)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.input(&video);
    let feats = model.backbone().extract(&mut g, &p, x)?;
    let map = feats.maps[stage - 1];
    let up = channel_mean_upsampled(g.value(map), g.dims(map), side)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_frames(out, "attention", &up, t, side)?;
    if t >= 2 {
        let diff = frame_difference_map(&video)?;
        write_frames(out, "difference", &diff.to_f64(), t - 1, side)?;
    }
    let (map_min, map_max) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ExportSummary {
        frames: t,
        side,
        map_min,
        map_max,
    })
}
