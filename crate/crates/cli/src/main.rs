//! `mamfsd`: dataset generation, training, evaluation, decoding and
//! attention export.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error,
//! 3 non-finite loss or gradient.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use mamfsd_core::config::RunConfig;
use mamfsd_core::ctc::labeling_log_prob;
use mamfsd_core::data::augment::{augment, Mode};
use mamfsd_core::data::dataset::{write_dataset, Dataset, META_FILE};
use mamfsd_core::data::synth::SynthSpec;
use mamfsd_core::eval::{evaluate, Decoder};
use mamfsd_core::export::export_attention;
use mamfsd_core::train::{load_run_model, train};
use mamfsd_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mamfsd", version, about = "Motor-attention CTC video sequence recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and dev/ splits).
    GenData {
        /// TOML generator spec; omitted keys keep their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on DATA/train, decoding DATA/dev every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Sets mam.count = 0.
        #[arg(long)]
        no_mam: bool,
        /// Disables self-distillation.
        #[arg(long)]
        no_distill: bool,
    },
    /// Beam-decode a dataset split and report WER.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A split directory (or a dataset root, meaning its dev split).
        #[arg(long)]
        data: PathBuf,
        /// Defaults to decode.beam of the run config.
        #[arg(long)]
        beam: Option<usize>,
        /// Per-sample CSV path (default: printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a single MFT1 video.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Write the channel-mean attention map of one gated stage as PGM frames.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        /// 1-based backbone stage.
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn split_dir(data: &Path) -> PathBuf {
    if !data.join(META_FILE).exists() && data.join("dev").join(META_FILE).exists() {
        data.join("dev")
    } else {
        data.to_path_buf()
    }
}

fn gen_data(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> anyhow::Result<()> {
    let mut s = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            SynthSpec::parse(&text).with_context(|| format!("spec {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let [train, dev] = write_dataset(&s, &out)?;
    println!("train: {} samples", train.samples);
    println!("dev: {} samples", dev.samples);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    epochs: Option<usize>,
    no_mam: bool,
    no_distill: bool,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if no_mam {
        cfg.disable_mam();
    }
    if no_distill {
        cfg.disable_distill();
    }
    cfg.validate()?;
    let train_set = Dataset::open(&data.join("train"))?;
    let dev_set = Dataset::open(&data.join("dev"))?;
    let summary = train(&cfg, &train_set, &dev_set, &out, &mut |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  task {:.4}  dev WER {:.2}",
            r.epoch, r.lr, r.loss.loss_total, r.loss.loss_task, r.dev_wer
        );
    })?;
    println!("best epoch: {}", summary.best_epoch);
    println!("best epoch dev WER: {:.2}", summary.best_dev_wer);
    println!("dev WER (beam {}): {:.2}", cfg.decode.beam, summary.final_eval.pooled.wer);
    Ok(())
}

fn run_eval(ckpt: PathBuf, data: PathBuf, beam: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let (cfg, model) = load_run_model(&ckpt)?;
    let set = Dataset::open(&split_dir(&data))?;
    let k = beam.unwrap_or(cfg.decode.beam);
    if k == 0 {
        bail!(Error::Config("--beam must be positive".into()));
    }
    let report = evaluate(&model, &set, &cfg.augment_config(), Decoder::Beam(k), true)?;
    let csv = report.to_csv();
    match out {
        Some(p) => std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?,
        None => print!("{csv}"),
    }
    let p = report.pooled;
    eprintln!(
        "WER {:.2} (ins {}, del {}, sub {}, ref {}) over {} samples, beam {k}",
        p.wer,
        p.ins,
        p.del,
        p.sub,
        p.sum,
        report.samples.len()
    );
    Ok(())
}

fn run_decode(ckpt: PathBuf, video: PathBuf, beam: Option<usize>) -> anyhow::Result<()> {
    let (cfg, model) = load_run_model(&ckpt)?;
    let raw = Tensor::load(&video)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = augment(&raw, &cfg.augment_config(), Mode::Eval, &mut rng)?;
    let (lp, steps) = model.logprobs_f64(&v)?;
    let k = beam.unwrap_or(cfg.decode.beam);
    let label = Decoder::Beam(k.max(1)).decode(&lp, model.classes())?;
    let ids: Vec<String> = label.iter().map(usize::to_string).collect();
    println!("{}", ids.join(" "));
    eprintln!("log p = {}", labeling_log_prob(&lp, steps, model.classes(), &label));
    Ok(())
}

fn run_export(ckpt: PathBuf, video: PathBuf, stage: usize, out: PathBuf) -> anyhow::Result<()> {
    let (_, model) = load_run_model(&ckpt)?;
    let v = Tensor::load(&video)?;
    let s = export_attention(&model, &v, stage, &out)?;
    println!(
        "wrote {} frames at {}x{} (map range {:.4}..{:.4})",
        s.frames, s.side, s.side, s.map_min, s.map_max
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec, out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            epochs,
            no_mam,
            no_distill,
        } => run_train(config, data, out, seed, epochs, no_mam, no_distill),
        Command::Eval { ckpt, data, beam, out } => run_eval(ckpt, data, beam, out),
        Command::Decode { ckpt, video, beam } => run_decode(ckpt, video, beam),
        Command::ExportAttention { ckpt, video, stage, out } => run_export(ckpt, video, stage, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
