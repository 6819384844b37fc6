//! On-disk dataset split: `dataset.toml`, `manifest.tsv`, `videos/*.mft`
//! and the diagnostics-only `segments.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{generate_sample, Sample, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const META_FILE: &str = "dataset.toml";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SEGMENTS_FILE: &str = "segments.tsv";
pub const VIDEO_DIR: &str = "videos";

/// Split-level metadata written beside the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub split: String,
    pub vocab: usize,
    pub resolution: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub video_path: String,
    pub frames: usize,
    pub label: Vec<usize>,
}

/// A readable split. Segment boundaries are deliberately not loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub entries: Vec<Entry>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates one split of `spec` into `dir`.
pub fn write_split(spec: &SynthSpec, split: Split, dir: &Path) -> Result<DatasetMeta> {
    spec.validate()?;
    let count = match split {
        Split::Train => spec.train,
        Split::Dev => spec.dev,
    };
    create_dir(&dir.join(VIDEO_DIR))?;
    let mut manifest = String::new();
    let mut segments = String::new();
    for index in 0..count {
        let s: Sample = generate_sample(spec, split, index);
        let rel = format!("{VIDEO_DIR}/{}.mft", s.id);
        s.video.save(&dir.join(&rel))?;
        let label: Vec<String> = s.label.iter().map(usize::to_string).collect();
        writeln!(manifest, "{}\t{rel}\t{}\t{}", s.id, s.video.dims()[0], label.join(" ")).expect("string write");
        let segs: Vec<String> = s.segments.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        writeln!(segments, "{}\t{}", s.id, segs.join(" ")).expect("string write");
    }
    write_file(&dir.join(MANIFEST_FILE), &manifest)?;
    write_file(&dir.join(SEGMENTS_FILE), &segments)?;
    let meta = DatasetMeta {
        split: split.name().to_string(),
        vocab: spec.vocab,
        resolution: spec.resolution,
        samples: count,
        seed: spec.seed,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::format("dataset metadata", e.to_string()))?;
    write_file(&dir.join(META_FILE), &text)?;
    Ok(meta)
}

/// Writes `train/` and `dev/` under `root`.
pub fn write_dataset(spec: &SynthSpec, root: &Path) -> Result<[DatasetMeta; 2]> {
    Ok([
        write_split(spec, Split::Train, &root.join(Split::Train.name()))?,
        write_split(spec, Split::Dev, &root.join(Split::Dev.name()))?,
    ])
}

fn parse_manifest_line(line: &str, lineno: usize, vocab: usize) -> Result<Entry> {
    let bad = |d: String| Error::format("manifest", format!("line {lineno}: {d}"));
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
    }
    let frames: usize = fields[2].parse().map_err(|_| bad(format!("bad frame count {:?}", fields[2])))?;
    let label = fields[3]
        .split_whitespace()
        .map(|t| {
            let id: usize = t.parse().map_err(|_| bad(format!("bad gloss id {t:?}")))?;
            if id == 0 || id > vocab {
                return Err(bad(format!("gloss id {id} outside 1..={vocab}")));
            }
            Ok(id)
        })
        .collect::<Result<Vec<_>>>()?;
    if label.is_empty() {
        return Err(bad("empty label".into()));
    }
    Ok(Entry {
        id: fields[0].to_string(),
        video_path: fields[1].to_string(),
        frames,
        label,
    })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            toml::from_str(&text).map_err(|e| Error::format("dataset metadata", e.to_string()))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_manifest_line(l, i + 1, meta.vocab))
            .collect::<Result<Vec<_>>>()?;
        if entries.is_empty() {
            return Err(Error::format("manifest", format!("{} lists no samples", manifest_path.display())));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            meta,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a `[T, 3, R, R]` video and checks it against the manifest.
    pub fn load_video(&self, entry: &Entry) -> Result<Tensor> {
        let v = Tensor::load(&self.dir.join(&entry.video_path))?;
        let r = self.meta.resolution;
        if v.dims() != [entry.frames, 3, r, r] {
            return Err(Error::format(
                "video",
                format!("{}: dims {:?}, manifest says [{}, 3, {r}, {r}]", entry.id, v.dims(), entry.frames),
            ));
        }
        Ok(v)
    }
}

/// Diagnostics only: per-sample gloss frame ranges.
pub fn read_segments(dir: &Path) -> Result<Vec<(String, Vec<(usize, usize)>)>> {
    let path = dir.join(SEGMENTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, rest) = l
                .split_once('\t')
                .ok_or_else(|| Error::format("segments", format!("missing tab in {l:?}")))?;
            let segs = rest
                .split_whitespace()
                .map(|s| {
                    let (a, b) = s
                        .split_once('-')
                        .ok_or_else(|| Error::format("segments", format!("bad range {s:?}")))?;
                    let p = |v: &str| v.parse::<usize>().map_err(|_| Error::format("segments", format!("bad range {s:?}")));
                    Ok((p(a)?, p(b)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id.to_string(), segs))
        })
        .collect()
}
