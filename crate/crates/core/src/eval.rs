//! Center-crop evaluation of a model over a dataset split.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{beam_decode, greedy_decode, labeling_log_prob};
use crate::data::augment::{augment, AugmentConfig, Mode};
use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{pool, wer, WerBreakdown};
use crate::model::Model;

pub const THREADS_ENV: &str = "MAMFSD_THREADS";

/// Worker cap from `MAMFSD_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Greedy,
    Beam(usize),
}

impl Decoder {
    pub fn decode(self, logprobs: &[f64], classes: usize) -> Result<Vec<usize>> {
        Ok(match self {
            Decoder::Greedy => greedy_decode(logprobs, classes).into_vec(),
            Decoder::Beam(k) => beam_decode(logprobs, classes, k)?.label.into_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub wer: WerBreakdown,
    /// Exact log-probability of `hypothesis`.
    pub log_prob: f64,
    /// Beam-1 labeling and its log-probability, when requested.
    pub baseline: Option<(Vec<usize>, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleResult>,
    pub pooled: WerBreakdown,
}

fn eval_one(
    model: &Model,
    data: &Dataset,
    index: usize,
    aug: &AugmentConfig,
    decoder: Decoder,
    with_baseline: bool,
) -> Result<SampleResult> {
    let e = &data.entries[index];
    let raw = data.load_video(e)?;
    // eval mode draws nothing from the rng
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let video = augment(&raw, aug, Mode::Eval, &mut unused)?;
    let (lp, steps) = model.logprobs_f64(&video)?;
    let classes = model.classes();
    let hypothesis = decoder.decode(&lp, classes)?;
    let log_prob = labeling_log_prob(&lp, steps, classes, &hypothesis);
    let baseline = if with_baseline {
        let b = Decoder::Beam(1).decode(&lp, classes)?;
        let p = labeling_log_prob(&lp, steps, classes, &b);
        Some((b, p))
    } else {
        None
    };
    Ok(SampleResult {
        id: e.id.clone(),
        wer: wer(&e.label, &hypothesis)?,
        reference: e.label.clone(),
        hypothesis,
        log_prob,
        baseline,
    })
}

/// Decodes every sample with a center crop and pools the WER. Work is split
/// over [`worker_count`] threads; results do not depend on the split.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    aug: &AugmentConfig,
    decoder: Decoder,
    with_baseline: bool,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "dataset has no samples"));
    }
    if data.meta.vocab != model.config().vocab {
        return Err(Error::Config(format!(
            "dataset vocab {} does not match model vocab {}",
            data.meta.vocab,
            model.config().vocab
        )));
    }
    let n = data.len();
    let workers = worker_count().min(n);
    let samples = if workers <= 1 {
        (0..n)
            .map(|i| eval_one(model, data, i, aug, decoder, with_baseline))
            .collect::<Result<Vec<_>>>()?
    } else {
        let chunk = n.div_ceil(workers);
        let parts: Vec<Result<Vec<SampleResult>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(n))
                            .map(|i| eval_one(model, data, i, aug, decoder, with_baseline))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(n);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let pooled = pool(&samples.iter().map(|s| s.wer).collect::<Vec<_>>());
    Ok(EvalReport { samples, pooled })
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl EvalReport {
    /// Per-sample CSV followed by a pooled row with id `ALL`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,wer,ins,del,sub,ref_len,reference,hypothesis,log_prob,beam1_hypothesis,beam1_log_prob\n");
        for r in &self.samples {
            let (bh, bp) = match &r.baseline {
                Some((h, p)) => (join(h), p.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{bh},{bp}",
                r.id,
                r.wer.wer,
                r.wer.ins,
                r.wer.del,
                r.wer.sub,
                r.wer.sum,
                join(&r.reference),
                join(&r.hypothesis),
                r.log_prob
            )
            .expect("string write");
        }
        let p = &self.pooled;
        writeln!(s, "ALL,{},{},{},{},{},,,,,", p.wer, p.ins, p.del, p.sub, p.sum).expect("string write");
        s
    }
}
