//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use mamfsd_core::backbone::BackboneConfig;
use mamfsd_core::mam::MamConfig;
use mamfsd_core::model::{LossConfig, Model, ModelConfig};
use mamfsd_core::params::ParamStore;
use mamfsd_core::{Graph, Result, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform in `±[0.1, 1]`, keeping clear of kinks at zero.
pub fn away_from_zero(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn video(t: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = t * 3 * side * side;
    Tensor::new(vec![t, 3, side, side], (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

/// `sum(r * v)` for a fixed random `r`, so every output element matters.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let dims = g.dims(v).to_vec();
    let n: usize = dims.iter().product();
    let r = uniform(n, -1.0, 1.0, &mut rng(seed));
    let r = g.input_f64(dims, r)?;
    let prod = g.mul(v, r)?;
    let m = g.mean(prod)?;
    g.scale(m, n as f64)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub probes: usize,
    pub failures: usize,
    /// Probes redrawn because the perturbation crossed a kink.
    pub skipped: usize,
    pub worst: f64,
}

impl FdReport {
    pub fn merge(&mut self, o: FdReport) {
        self.probes += o.probes;
        self.failures += o.failures;
        self.skipped += o.skipped;
        self.worst = self.worst.max(o.worst);
    }

    pub fn ok(&self) -> bool {
        self.failures == 0 && self.probes > 0
    }

    /// Relative error against `max(|analytic|, |numeric|, FD_FLOOR)`; the floor
    /// keeps round-off in the loss from dominating near-zero gradients.
    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        self.probes += 1;
        self.worst = self.worst.max(rel);
        if rel > FD_REL_TOL {
            self.failures += 1;
        }
    }
}

/// Central finite differences of the scalar built by `f` against reverse
/// mode, for `probes` random coordinates of every input (all coordinates
/// when an input is smaller).
pub fn fd_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], probes: usize, seed: u64, f: F) -> FdReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((d, _), v)| g.input_f64(d.clone(), v.clone()).unwrap())
            .collect();
        let root = f(&mut g, &vars).unwrap();
        g.scalar(root)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(d, v)| g.param_f64(d.clone(), v.clone()).unwrap())
        .collect();
    let root = f(&mut g, &vars).unwrap();
    let grads = g.backward(root).unwrap();
    let mut r = rng(seed);
    let mut report = FdReport::default();
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    for (k, v) in vars.iter().enumerate() {
        let n = vals[k].len();
        let analytic: Vec<f64> = grads.get(*v).map_or(vec![0.0; n], <[f64]>::to_vec);
        let coords: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            (0..probes).map(|_| r.random_range(0..n)).collect()
        };
        for i in coords {
            let x = vals[k][i];
            vals[k][i] = x + FD_STEP;
            let up = eval(&vals);
            vals[k][i] = x - FD_STEP;
            let down = eval(&vals);
            vals[k][i] = x;
            report.record(analytic[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// A complete model small enough for thousands of forward passes.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stem: 2,
            channels: [2, 3, 3, 4],
            strides: [1, 2, 2, 2],
            blocks: [1, 1, 1, 1],
            resolution: 8,
            mam_count: 4,
            mam: MamConfig::default(),
        },
        tconv_channels: 3,
        hidden: 3,
        vocab: 3,
    }
}

pub fn model_loss(model: &Model, video: &Tensor, label: &[usize], cfg: &LossConfig) -> f64 {
    model_loss_and_branches(model, video, label, cfg).0
}

pub fn model_loss_and_branches(model: &Model, video: &Tensor, label: &[usize], cfg: &LossConfig) -> (f64, Vec<usize>) {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.input(video);
    let out = model.forward(&mut g, &p, x).unwrap();
    let (loss, _) = model.loss(&mut g, &p, &out, label, cfg).unwrap();
    (g.scalar(loss), g.branch_signature())
}

/// Finite differences of the full training loss with respect to `probes`
/// random parameter scalars accepted by `select`. Parameters are stored in
/// `f32`, so the step actually taken is measured rather than assumed.
///
/// A central difference is only meaningful when `[x - h, x + h]` stays on
/// one smooth piece of the ReLU / max-pool network, so a coordinate whose
/// perturbation flips any branch is redrawn (counted in `skipped`).
pub fn model_fd_check(
    model: &mut Model,
    video: &Tensor,
    label: &[usize],
    cfg: &LossConfig,
    probes: usize,
    seed: u64,
    select: impl Fn(&str) -> bool,
) -> FdReport {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.input(video);
    let out = model.forward(&mut g, &p, x).unwrap();
    let (loss, _) = model.loss(&mut g, &p, &out, label, cfg).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut pg = mamfsd_core::params::ParamGrads::zeros(&model.params);
    pg.accumulate(&p, &grads, 1.0);
    let ids: Vec<_> = model.params.ids().filter(|&id| select(model.params.name(id))).collect();
    assert!(!ids.is_empty(), "no parameter selected");
    let (_, base) = model_loss_and_branches(model, video, label, cfg);
    let mut r = rng(seed);
    let mut report = FdReport::default();
    while report.probes < probes {
        assert!(report.skipped < 20 * probes, "too many probes cross a kink");
        let id = ids[r.random_range(0..ids.len())];
        let n = model.params.get(id).len();
        let i = r.random_range(0..n);
        let x0 = model.params.get(id).data()[i];
        let up_v = (x0 as f64 + FD_STEP) as f32;
        let down_v = (x0 as f64 - FD_STEP) as f32;
        model.params.get_mut(id).data_mut()[i] = up_v;
        let (up, up_sig) = model_loss_and_branches(model, video, label, cfg);
        model.params.get_mut(id).data_mut()[i] = down_v;
        let (down, down_sig) = model_loss_and_branches(model, video, label, cfg);
        model.params.get_mut(id).data_mut()[i] = x0;
        if up_sig != base || down_sig != base {
            report.skipped += 1;
            continue;
        }
        report.record(pg.get(id)[i], (up - down) / (up_v as f64 - down_v as f64));
    }
    report
}

pub fn store_bits(s: &ParamStore) -> Vec<(String, Vec<u32>)> {
    s.iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Every labeling of `steps` frames with `classes` symbols (blank = 0):
/// returns `(collapsed label, path log-probability)` for all paths.
pub fn enumerate_paths(logprobs: &[f64], steps: usize, classes: usize) -> Vec<(Vec<usize>, f64)> {
    let total = classes.pow(steps as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let mut path = Vec::with_capacity(steps);
        for _ in 0..steps {
            path.push(c % classes);
            c /= classes;
        }
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| logprobs[t * classes + k]).sum();
        let mut label = Vec::new();
        let mut prev = 0;
        for &k in &path {
            if k != 0 && k != prev {
                label.push(k);
            }
            prev = k;
        }
        out.push((label, lp));
    }
    out
}

/// `ln sum exp` of a slice, `-inf` when empty.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Random row-normalized log-probabilities `[steps, classes]`.
pub fn random_logprobs(steps: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps * classes);
    for _ in 0..steps {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = log_sum_exp(&row);
        out.extend(row.iter().map(|x| x - z));
    }
    out
}

/// Brute-force minimal alignment: exhaustive recursion without memoization.
pub fn brute_edit(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ar)), Some((y, br))) => {
            let sub = brute_edit(ar, br) + usize::from(x != y);
            let del = brute_edit(ar, b) + 1;
            let ins = brute_edit(a, br) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// A tiny dataset on disk plus a run configuration sized for it.
pub fn tiny_run(root: &std::path::Path, seed: u64) -> (mamfsd_core::config::RunConfig, mamfsd_core::data::Dataset, mamfsd_core::data::Dataset) {
    use mamfsd_core::data::{dataset::write_dataset, Dataset, SynthSpec};
    let spec = SynthSpec {
        train: 6,
        dev: 3,
        vocab: 3,
        max_len: 3,
        resolution: 16,
        seed,
        ..SynthSpec::default()
    };
    write_dataset(&spec, root).unwrap();
    let text = r#"
        [model]
        stem = 2
        channels = [2, 3, 3, 4]
        tconv_channels = 3
        hidden = 3
        [data]
        vocab = 3
        resolution = 16
        crop = 8
        [train]
        lr = 1e-3
        epochs = 2
        lr_drop_epochs = [1]
    "#;
    let cfg = mamfsd_core::config::RunConfig::parse(text).unwrap();
    let train = Dataset::open(&root.join("train")).unwrap();
    let dev = Dataset::open(&root.join("dev")).unwrap();
    (cfg, train, dev)
}
pub mod gradients;
