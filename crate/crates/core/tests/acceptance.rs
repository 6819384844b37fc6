//! Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
//! as arguments to run a subset (`cargo test --test acceptance -- 5 6`).

mod common;

use std::path::Path;
use std::time::Instant;

use common::*;
use mamfsd_core::adam::AdamState;
use mamfsd_core::checkpoint::Checkpoint;
use mamfsd_core::config::RunConfig;
use mamfsd_core::ctc::{beam_decode, ctc_loss};
use mamfsd_core::data::dataset::write_dataset;
use mamfsd_core::data::{Dataset, SynthSpec};
use mamfsd_core::distill::{self_distill_loss, DistillWeights};
use mamfsd_core::eval::{evaluate, Decoder};
use mamfsd_core::mam::{MamBlock, MamConfig};
use mamfsd_core::metrics::wer;
use mamfsd_core::model::Model;
use mamfsd_core::params::{ParamGrads, ParamStore};
use mamfsd_core::train::{build_model, train, train_step, LOG_FILE};
use mamfsd_core::{Error, Graph, Tensor};
use rand::RngExt;

/// Dev WER bound for the end-to-end run, locked from the pilot run
/// (30 epochs at these settings reached 0-5% dev WER from epoch 8 on).
const E2E_WER_MAX: f64 = 15.0;
const E2E_BUDGET_SECS: f64 = 1800.0;
const E2E_EPOCHS: usize = 30;
const ABLATION_EPOCHS: usize = 10;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut total = FdReport::default();
    let mut bad = Vec::new();
    for (name, r) in common::gradients::all_ops() {
        if !r.ok() {
            bad.push(name);
        }
        total.merge(r);
    }
    let model = common::gradients::full_model(120);
    let student = common::gradients::student_parameters(60);
    for (name, r) in [("full model", model), ("student parameters", student)] {
        if !r.ok() {
            bad.push(name.to_string());
        }
        total.merge(r);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && model.probes >= 100 && secs < 120.0,
        format!(
            "{} probes ({} on the full model), worst rel err {:.2e}, {} failing groups {bad:?} (budget 120s)",
            total.probes, model.probes, total.worst, bad.len()
        ),
    )
}

fn ctc_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1000);
    let (mut worst, mut bad, mut infeasible) = (0.0f64, 0, 0);
    let cases = 600;
    for _ in 0..cases {
        let steps = r.random_range(1..=6);
        let vocab = r.random_range(1..=3);
        let label: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=vocab)).collect();
        let lp = random_logprobs(steps, vocab + 1, &mut r);
        let paths: Vec<f64> = enumerate_paths(&lp, steps, vocab + 1)
            .into_iter()
            .filter(|(l, _)| *l == label)
            .map(|(_, p)| p)
            .collect();
        match ctc_loss(&lp, steps, vocab + 1, &label) {
            Ok(loss) => {
                let err = (loss + log_sum_exp(&paths)).abs();
                worst = worst.max(err);
                bad += usize::from(err > 1e-9 || paths.is_empty());
            }
            Err(Error::InfeasibleLabel { .. }) if paths.is_empty() => infeasible += 1,
            Err(_) => bad += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 60.0,
        format!("{cases} cases ({infeasible} infeasible), max abs err {worst:.1e}, {bad} mismatches (budget 60s)"),
    )
}

fn decoder_oracle() -> Outcome {
    let mut r = rng(1001);
    let mut exhaustive_bad = 0;
    for _ in 0..400 {
        let steps = r.random_range(1..=5);
        let classes = r.random_range(2..=3);
        let lp = random_logprobs(steps, classes, &mut r);
        let mut table: std::collections::BTreeMap<Vec<usize>, Vec<f64>> = Default::default();
        for (l, p) in enumerate_paths(&lp, steps, classes) {
            table.entry(l).or_default().push(p);
        }
        let best = table.values().map(|ps| log_sum_exp(ps)).fold(f64::NEG_INFINITY, f64::max);
        let h = beam_decode(&lp, classes, table.len()).unwrap();
        let got = log_sum_exp(&table[h.label.as_ref() as &[usize]]);
        exhaustive_bad += usize::from((got - best).abs() > 1e-9 || (h.log_prob - best).abs() > 1e-9);
    }
    let mut mono_bad = 0;
    for _ in 0..250 {
        let steps = r.random_range(3..=12);
        let classes = r.random_range(2..=6);
        let lp: Vec<f64> = random_logprobs(steps, classes, &mut r);
        let scores: Vec<f64> = [1, 2, 4, 8, 16].iter().map(|&w| beam_decode(&lp, classes, w).unwrap().log_prob).collect();
        mono_bad += usize::from(scores.windows(2).any(|p| p[1] < p[0]));
    }
    outcome(
        exhaustive_bad == 0 && mono_bad == 0,
        format!("400 exhaustive cases ({exhaustive_bad} wrong), 250 width sweeps ({mono_bad} non-monotone)"),
    )
}

fn wer_oracle() -> Outcome {
    let mut r = rng(1002);
    let (mut bad, mut identity_bad) = (0, 0);
    for _ in 0..1500 {
        let a: Vec<usize> = (0..r.random_range(1..=8)).map(|_| r.random_range(1..=4)).collect();
        let b: Vec<usize> = (0..r.random_range(0..=8)).map(|_| r.random_range(1..=4)).collect();
        let w = wer(&a, &b).unwrap();
        bad += usize::from(w.edits() != brute_edit(&a, &b));
        identity_bad += usize::from(w.wer != 100.0 * (w.ins + w.del + w.sub) as f64 / w.sum as f64);
    }
    outcome(
        bad == 0 && identity_bad == 0,
        format!("1500 pairs, {bad} edit-count mismatches, {identity_bad} identity violations"),
    )
}

fn mam_block(channels: usize, seed: u64) -> (ParamStore, MamBlock) {
    let mut store = ParamStore::new();
    let b = MamBlock::init(&mut store, 1, channels, &MamConfig::default(), &mut rng(seed)).unwrap();
    (store, b)
}

fn mam_run(store: &ParamStore, b: &MamBlock, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.input(x);
    let (out, map) = b.forward(&mut g, &p, xv).unwrap();
    (g.value(out).to_vec(), g.value(map).to_vec())
}

fn mam_contracts() -> Outcome {
    let mut r = rng(1003);
    let mut outside = 0;
    let mut checked = 0;
    for trial in 0..200 {
        let (store, b) = mam_block(3, trial);
        let x = tensor(&[3, r.random_range(1..8), 3, 3], &mut r);
        let (_, map) = mam_run(&store, &b, &x);
        outside += map.iter().filter(|&&m| !(m > 0.0 && m < 1.0)).count();
        checked += map.len();
    }
    let (mut store, b) = mam_block(4, 7);
    let (w, bias) = b.final_layer();
    store.get_mut(w).data_mut().fill(0.0);
    store.get_mut(bias).data_mut().fill(0.0);
    let x = tensor(&[4, 6, 5, 5], &mut r);
    let (out, _) = mam_run(&store, &b, &x);
    let half_exact = out.iter().zip(x.data()).all(|(o, &xi)| *o == 0.5 * xi as f64);

    // open every ReLU so influence reaches the whole field, then perturb the centre frame
    let cfg = MamConfig::default();
    let (mut store, b) = mam_block(2, 8);
    for (w, _) in b.layer_params().collect::<Vec<_>>() {
        for v in store.get_mut(w).data_mut() {
            *v = v.abs() * 0.3;
        }
    }
    let frames = 21;
    let base: Vec<f32> = uniform(2 * frames * 2, 0.1, 1.0, &mut r).iter().map(|&v| v as f32).collect();
    let x = Tensor::new(vec![2, frames, 1, 2], base).unwrap();
    let (_, m0) = mam_run(&store, &b, &x);
    let t = frames / 2;
    let mut y = x.clone();
    for c in 0..2 {
        for q in 0..2 {
            y.data_mut()[(c * frames + t) * 2 + q] += 0.5;
        }
    }
    let (_, m1) = mam_run(&store, &b, &y);
    let reached: Vec<usize> = (0..frames)
        .filter(|&s| (0..2).any(|c| (0..2).any(|q| m0[(c * frames + s) * 2 + q] != m1[(c * frames + s) * 2 + q])))
        .collect();
    let field = reached.len();
    let contiguous = reached.first().is_some_and(|&lo| reached.last() == Some(&(lo + field - 1)));
    outcome(
        outside == 0 && half_exact && field == 9 && contiguous && cfg.receptive_field() == 9,
        format!(
            "{checked} map values, {outside} outside (0,1); zeroed final layer exact: {half_exact}; \
             measured field {field} frames (L={}, N={})",
            cfg.layers, cfg.kernel
        ),
    )
}

fn distill_contracts() -> Outcome {
    let model = Model::new(&tiny_model_config(), 21).unwrap();
    let mut r = rng(1004);
    let mut worst = 0.0f64;
    let mut stop_grad_ok = true;
    for trial in 0..10 {
        let v = video(6, 8, &mut r);
        let w = DistillWeights {
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            lambda: r.random_range(0.0..2.0),
        };
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let x = g.input(&v);
        let s = model.backbone().extract(&mut g, &p, x).unwrap();
        let d = self_distill_loss(&mut g, &p, model.backbone(), &s, &w).unwrap();
        let mut mses = [0.0; 3];
        for i in 1..4 {
            let proj = model.backbone().dblock_project(&mut g, &p, i, s.stages[i - 1]).unwrap();
            let (a, b) = (g.value(s.stages[i]), g.value(proj));
            mses[i - 1] = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64;
        }
        let want = w.alpha * mses[0] + w.beta * mses[1] + w.lambda * mses[2];
        worst = worst.max((g.scalar(d.weighted) - want).abs());
        let i = 1 + trial % 3;
        let gr = g.backward(d.terms[i - 1]).unwrap();
        let mut pg = ParamGrads::zeros(&model.params);
        pg.accumulate(&p, &gr, 1.0);
        for id in model.params.ids() {
            let n = model.params.name(id);
            if n.starts_with(&format!("stage{}.", i + 1)) || n.starts_with(&format!("mam{}.", i + 1)) {
                stop_grad_ok &= pg.get(id).iter().all(|&x| x == 0.0);
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let (base, tr, _) = tiny_run(dir.path(), 21);
    let mut zero = base.clone();
    zero.distill.enabled = true;
    zero.distill.alpha = 0.0;
    zero.distill.beta = 0.0;
    zero.distill.lambda = 0.0;
    let mut off = base;
    off.disable_distill();
    let run = |cfg: &RunConfig| {
        let mut model = build_model(cfg).unwrap();
        let mut adam = AdamState::new(&model.params);
        let mut losses = Vec::new();
        for epoch in 1..=2 {
            for batch in [[0, 1], [2, 3], [4, 5]] {
                losses.push(train_step(&mut model, &mut adam, cfg, &tr, &batch, epoch).unwrap().loss_total.to_bits());
            }
        }
        (store_bits(&model.params), losses)
    };
    let identical = run(&zero) == run(&off);
    outcome(
        worst <= 1e-7 && stop_grad_ok && identical,
        format!(
            "recomposition max err {worst:.1e}; teacher-only grads exactly zero: {stop_grad_ok}; \
             zero-weight run bit-identical to disabled: {identical}"
        ),
    )
}

/// Small model on the default synthetic data, as used by the pilot run.
fn e2e_config(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.stem = 4;
    cfg.model.channels = [4, 8, 16, 32];
    cfg.model.tconv_channels = 32;
    cfg.model.hidden = 32;
    cfg.train.lr = 1e-3;
    cfg.train.epochs = epochs;
    cfg.train.lr_drop_epochs = vec![epochs * 2 / 3];
    cfg.train.seed = seed;
    cfg.data.flip_prob = 0.0;
    cfg
}

fn default_data(root: &Path) -> (Dataset, Dataset) {
    write_dataset(&SynthSpec::default(), root).unwrap();
    (Dataset::open(&root.join("train")).unwrap(), Dataset::open(&root.join("dev")).unwrap())
}

fn end_to_end(tr: &Dataset, dev: &Dataset) -> Outcome {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = e2e_config(0, E2E_EPOCHS);
    let s = match train(&cfg, tr, dev, out.path(), &mut |r| {
        eprintln!("  [7] epoch {:>2}  loss {:.4}  dev WER {:.2}", r.epoch, r.loss.loss_total, r.dev_wer)
    }) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let last = s.epochs.last().unwrap().dev_wer;
    let mut model = build_model(&cfg).unwrap();
    model.params.load_from(&Checkpoint::load(&out.path().join("last.mfck")).unwrap().params).unwrap();
    let train_wer = evaluate(&model, tr, &cfg.augment_config(), Decoder::Greedy, false).unwrap().pooled.wer;
    let ordering = if train_wer <= last { "ok" } else { "train above dev (soft check)" };
    outcome(
        last <= E2E_WER_MAX && secs < E2E_BUDGET_SECS,
        format!(
            "final dev WER {last:.2}% (bound {E2E_WER_MAX}%), best epoch {} at {:.2}%, beam-10 on best {:.2}%, \
             train WER {train_wer:.2}% [{ordering}], training {secs:.0}s (budget {E2E_BUDGET_SECS:.0}s)",
            s.best_epoch, s.best_dev_wer, s.final_eval.pooled.wer
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation(tr: &Dataset, dev: &Dataset) -> Outcome {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &ABLATION_SEEDS {
        for gated in [true, false] {
            let mut cfg = e2e_config(seed, ABLATION_EPOCHS);
            if !gated {
                cfg.disable_mam();
            }
            let out = tempfile::tempdir().unwrap();
            let wer = match train(&cfg, tr, dev, out.path(), &mut |_| {}) {
                Ok(s) => s.epochs.last().unwrap().dev_wer,
                Err(e) => return outcome(false, format!("seed {seed} mam {}: {e}", cfg.mam.count)),
            };
            eprintln!("  [8] seed {seed} mam.count {}: dev WER {wer:.2}", cfg.mam.count);
            if gated { with.push(wer) } else { without.push(wer) }
        }
    }
    let (m4, m0) = (median(&mut with.clone()), median(&mut without.clone()));
    outcome(
        m4 <= m0,
        format!(
            "median dev WER mam.count=4 {m4:.2}% {with:.2?} vs mam.count=0 {m0:.2}% {without:.2?}, \
             {ABLATION_EPOCHS} epochs per run",
        ),
    )
}

fn determinism() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    let (cfg, tr, dev) = tiny_run(data.path(), 31);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, &tr, &dev, a.path(), &mut |_| {}).unwrap();
    train(&cfg, &tr, &dev, b.path(), &mut |_| {}).unwrap();
    let logs_same = std::fs::read(a.path().join(LOG_FILE)).unwrap() == std::fs::read(b.path().join(LOG_FILE)).unwrap();

    let mut model = build_model(&cfg).unwrap();
    model.params.load_from(&Checkpoint::load(&a.path().join("last.mfck")).unwrap().params).unwrap();
    let path = a.path().join("copy.mfck");
    Checkpoint::save(&path, &model.params, None).unwrap();
    let mut copy = build_model(&cfg).unwrap();
    copy.params.load_from(&Checkpoint::load(&path).unwrap().params).unwrap();
    let mut r = rng(1005);
    let mut same = 0;
    for _ in 0..10 {
        let v = video(r.random_range(8..20), 8, &mut r);
        let (x, y) = (model.logprobs_f64(&v).unwrap(), copy.logprobs_f64(&v).unwrap());
        same += usize::from(x.0.iter().zip(&y.0).all(|(p, q)| p.to_bits() == q.to_bits()) && x.1 == y.1);
    }
    outcome(
        logs_same && same == 10,
        format!("training logs byte-identical: {logs_same}; checkpoint round-trip bit-identical on {same}/10 inputs"),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let data_dir = tempfile::tempdir().unwrap();
    let mut data: Option<(Dataset, Dataset)> = None;
    let mut failed = 0;
    for n in 1..=9 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let (title, o) = match n {
            1 => ("gradient suite", gradients()),
            2 => ("ctc oracle", ctc_oracle()),
            3 => ("decoder oracle", decoder_oracle()),
            4 => ("wer oracle", wer_oracle()),
            5 => ("motor attention contracts", mam_contracts()),
            6 => ("distillation contracts", distill_contracts()),
            7 | 8 => {
                let (tr, dev) = data.get_or_insert_with(|| default_data(data_dir.path()));
                if n == 7 {
                    ("end-to-end synthetic training", end_to_end(tr, dev))
                } else {
                    ("ablation direction", ablation(tr, dev))
                }
            }
            _ => ("determinism and persistence", determinism()),
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!(
            "criterion {n}: {verdict}  {title}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
