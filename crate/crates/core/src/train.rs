//! Mini-batch Adam training with per-epoch dev decoding and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::augment::{augment, Mode};
use crate::data::dataset::Dataset;
use crate::data::synth::stream_seed;
use crate::distill::LossReport;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Decoder, EvalReport};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamGrads;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CKPT: &str = "best.mfck";
pub const LAST_CKPT: &str = "last.mfck";
pub const DEV_EVAL_FILE: &str = "dev_eval.csv";
pub const LOG_HEADER: &str = "epoch,lr,loss_total,loss_task,loss_mse_1,loss_mse_2,loss_mse_3,dev_wer";

const INIT_STREAM: u64 = 0x1;
const SHUFFLE_STREAM: u64 = 0x2;
const AUGMENT_STREAM: u64 = 0x3;

/// Seed of the parameter initialization stream of a run.
pub fn init_seed(seed: u64) -> u64 {
    stream_seed(&[seed, INIT_STREAM])
}

/// Augmentation stream of one training sample in one (1-based) epoch.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    stream_seed(&[seed, AUGMENT_STREAM, epoch as u64, index as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's training samples.
    pub loss: LossReport,
    pub dev_wer: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, l.loss_total, l.loss_task, l.loss_mse[0], l.loss_mse[1], l.loss_mse[2], self.dev_wer
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Per-epoch dev WER of the best epoch.
    pub best_dev_wer: f64,
    /// Beam evaluation of the best checkpoint on dev.
    pub final_eval: EvalReport,
    pub out_dir: PathBuf,
}

/// Checks that a dataset was generated for this configuration.
pub fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.meta.vocab != cfg.data.vocab {
        return Err(Error::Config(format!(
            "{}: dataset vocab {} but data.vocab = {}",
            data.dir.display(),
            data.meta.vocab,
            cfg.data.vocab
        )));
    }
    if data.meta.resolution != cfg.data.resolution {
        return Err(Error::Config(format!(
            "{}: dataset resolution {} but data.resolution = {}",
            data.dir.display(),
            data.meta.resolution,
            cfg.data.resolution
        )));
    }
    Ok(())
}

/// Builds the model a configuration describes, from its seed.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    Model::new(&cfg.model_config(), init_seed(cfg.train.seed))
}

/// One optimizer step over `batch` (training-set indices); returns the
/// batch-mean loss report.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &RunConfig,
    data: &Dataset,
    batch: &[usize],
    epoch: usize,
) -> Result<LossReport> {
    let aug = cfg.augment_config();
    let loss_cfg = cfg.loss_config();
    let mut grads = ParamGrads::zeros(&model.params);
    let mut mean = LossReport::default();
    let share = 1.0 / batch.len() as f64;
    for &idx in batch {
        let e = &data.entries[idx];
        let raw = data.load_video(e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.train.seed, epoch, idx));
        let video = augment(&raw, &aug, Mode::Train, &mut rng)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let x = g.input(&video);
        let out = model.forward(&mut g, &p, x)?;
        let (loss, report) = model.loss(&mut g, &p, &out, &e.label, &loss_cfg)?;
        let gr = g.backward(loss)?;
        grads.accumulate(&p, &gr, share);
        mean.add_scaled(&report, share);
    }
    let mut opt = cfg.adam_config();
    opt.lr = cfg.lr_at(epoch);
    adam_step(&mut model.params, &grads, adam, &opt)?;
    Ok(mean)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full training run writing `config.toml`, `train_log.csv`, `best.mfck`,
/// `last.mfck` and `dev_eval.csv` into `out`. `on_epoch` sees every record
/// as soon as it is logged.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    check_dataset(cfg, train_set)?;
    check_dataset(cfg, dev_set)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join(CONFIG_FILE))?;

    let mut model = build_model(cfg)?;
    let mut adam = AdamState::new(&model.params);
    let aug = cfg.augment_config();
    let dev_decoder = if cfg.train.dev_beam {
        Decoder::Beam(cfg.decode.beam)
    } else {
        Decoder::Greedy
    };
    let log_path = out.join(LOG_FILE);
    let mut log = format!("{LOG_HEADER}\n");
    write(&log_path, &log)?;

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.train.seed, SHUFFLE_STREAM, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut mean = LossReport::default();
        for batch in order.chunks(cfg.train.batch_size) {
            let r = train_step(&mut model, &mut adam, cfg, train_set, batch, epoch)?;
            mean.add_scaled(&r, batch.len() as f64 / order.len() as f64);
        }
        let dev = evaluate(&model, dev_set, &aug, dev_decoder, false)?;
        let rec = EpochRecord {
            epoch,
            lr: cfg.lr_at(epoch),
            loss: mean,
            dev_wer: dev.pooled.wer,
        };
        writeln!(log, "{}", rec.csv_line()).expect("string write");
        write(&log_path, &log)?;
        if best.is_none_or(|(_, w)| rec.dev_wer < w) {
            best = Some((epoch, rec.dev_wer));
            Checkpoint::save(&out.join(BEST_CKPT), &model.params, None)?;
        }
        on_epoch(&rec);
        epochs.push(rec);
    }
    Checkpoint::save(&out.join(LAST_CKPT), &model.params, Some(&adam))?;

    let (best_epoch, best_dev_wer) = best.expect("at least one epoch");
    let best_ck = Checkpoint::load(&out.join(BEST_CKPT))?;
    model.params.load_from(&best_ck.params)?;
    let final_eval = evaluate(&model, dev_set, &aug, Decoder::Beam(cfg.decode.beam), true)?;
    write(&out.join(DEV_EVAL_FILE), &final_eval.to_csv())?;
    Ok(TrainSummary {
        epochs,
        best_epoch,
        best_dev_wer,
        final_eval,
        out_dir: out.to_path_buf(),
    })
}

/// Loads a checkpoint into the model described by the `config.toml` beside it.
pub fn load_run_model(ckpt: &Path) -> Result<(RunConfig, Model)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model = build_model(&cfg)?;
    let ck = Checkpoint::load(ckpt)?;
    model.params.load_from(&ck.params)?;
    Ok((cfg, model))
}
