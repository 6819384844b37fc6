//! Finite-difference checks of every differentiable operator, shared by the
//! gradient tests and the acceptance run.

use super::*;
use mamfsd_core::distill::DistillWeights;
use mamfsd_core::model::{LossConfig, Model, TaskLossConfig};

pub type Named = Vec<(String, FdReport)>;

fn input(dims: &[usize], seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = dims.iter().product();
    (dims.to_vec(), uniform(n, -1.0, 1.0, &mut rng(seed)))
}

fn kinkless(dims: &[usize], seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = dims.iter().product();
    (dims.to_vec(), away_from_zero(n, &mut rng(seed)))
}

pub fn conv2d() -> Named {
    let mut out = Vec::new();
    for (stride, pad, seed) in [(1, 1, 1), (2, 1, 2), (1, 0, 3), (2, 0, 4)] {
        let ins = [input(&[2, 3, 5, 5], seed), input(&[4, 3, 3, 3], seed + 10), input(&[4], seed + 20)];
        let r = fd_check(&ins, 12, seed, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(g, y, seed)
        });
        out.push((format!("conv2d stride {stride} pad {pad}"), r));
    }
    out
}

pub fn temporal_conv() -> Named {
    let mut out = Vec::new();
    for (n, seed) in [(1usize, 5u64), (3, 6), (5, 7)] {
        let ins = [input(&[3, 6, 2, 2], seed), input(&[2, 3, n], seed + 1), input(&[2], seed + 2)];
        let r = fd_check(&ins, 12, seed, |g, v| {
            let y = g.conv3d_temporal(v[0], v[1], v[2])?;
            weighted_sum(g, y, seed)
        });
        out.push((format!("conv3d_temporal N={n}"), r));
    }
    let ins = [input(&[3, 7, 2, 1], 8), input(&[3, 1, 3], 9), input(&[3], 10)];
    let r = fd_check(&ins, 12, 8, |g, v| {
        let y = g.conv3d_temporal_depthwise(v[0], v[1], v[2])?;
        weighted_sum(g, y, 8)
    });
    out.push(("depthwise temporal".to_string(), r));
    out
}

pub fn pointwise() -> Named {
    let mut out = Vec::new();
    let r = fd_check(&[kinkless(&[3, 4], 11)], 20, 11, |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, 1)
    });
    out.push(("relu".to_string(), r));
    let r = fd_check(&[input(&[3, 4], 12)], 20, 12, |g, v| {
        let y = g.sigmoid(v[0])?;
        weighted_sum(g, y, 2)
    });
    out.push(("sigmoid".to_string(), r));
    let r = fd_check(&[input(&[3, 4], 13)], 20, 13, |g, v| {
        let y = g.tanh(v[0])?;
        weighted_sum(g, y, 3)
    });
    out.push(("tanh".to_string(), r));
    let r = fd_check(&[input(&[5], 14)], 20, 14, |g, v| {
        let y = g.scale(v[0], -1.75)?;
        weighted_sum(g, y, 4)
    });
    out.push(("scale".to_string(), r));
    let r = fd_check(&[input(&[2, 3], 15), input(&[2, 3], 16)], 20, 15, |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 5)
    });
    out.push(("mul".to_string(), r));
    let r = fd_check(&[input(&[2, 3], 17), input(&[2, 3], 18)], 20, 17, |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 6)
    });
    out.push(("add".to_string(), r));
    out
}

pub fn reduction() -> Named {
    let mut out = Vec::new();
    let r = fd_check(&[input(&[2, 3, 4, 4], 21)], 20, 21, |g, v| {
        let y = g.global_avg_pool_2d(v[0])?;
        weighted_sum(g, y, 7)
    });
    out.push(("global_avg_pool_2d".to_string(), r));
    // distinct values keep every pair's argmax away from ties
    let mut vals: Vec<f64> = (0..7 * 3).map(|i| i as f64 * 0.1).collect();
    let perm = uniform(vals.len(), 0.0, 1.0, &mut rng(22));
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| perm[a].total_cmp(&perm[b]));
    vals = idx.iter().map(|&i| vals[i] - 1.0).collect();
    let r = fd_check(&[(vec![7, 3], vals)], 30, 22, |g, v| {
        let y = g.max_pool_1d(v[0])?;
        weighted_sum(g, y, 8)
    });
    out.push(("max_pool_1d".to_string(), r));
    let r = fd_check(&[input(&[3, 5], 23)], 20, 23, |g, v| g.mean(v[0]));
    out.push(("mean".to_string(), r));
    for axis in 0..3 {
        let r = fd_check(&[input(&[3, 4, 2], 24 + axis as u64)], 24, 24, |g, v| {
            let y = g.log_softmax(v[0], axis)?;
            weighted_sum(g, y, 9)
        });
        out.push((format!("log_softmax axis {axis}"), r));
    }
    out
}

pub fn loss() -> Named {
    let mut out = Vec::new();
    let r = fd_check(&[input(&[3, 4], 31), input(&[3, 4], 32)], 12, 31, |g, v| g.mse(v[0], v[1]));
    out.push(("mse".to_string(), r));
    let r = fd_check(&[input(&[4, 5], 33), input(&[4, 5], 34)], 20, 33, |g, v| {
        let p = g.log_softmax(v[0], 1)?;
        let q = g.log_softmax(v[1], 1)?;
        g.kl_div(p, q)
    });
    out.push(("kl_div".to_string(), r));
    for (label, seed) in [(vec![1usize, 2], 35u64), (vec![2, 2], 36), (vec![1], 37)] {
        // raw scores: the loss is differentiable for unnormalized inputs too
        let r = fd_check(&[input(&[6, 3], seed)], 18, seed, |g, v| g.ctc_loss(v[0], &label));
        out.push((format!("ctc raw {label:?}"), r));
        let r = fd_check(&[input(&[6, 3], seed + 50)], 18, seed, |g, v| {
            let lp = g.log_softmax(v[0], 1)?;
            g.ctc_loss(lp, &label)
        });
        out.push((format!("ctc normalized {label:?}"), r));
    }
    out
}

pub fn layout() -> Named {
    let mut out = Vec::new();
    let r = fd_check(&[input(&[2, 3, 2, 2], 41)], 24, 41, |g, v| {
        let y = g.permute_tc(v[0])?;
        weighted_sum(g, y, 10)
    });
    out.push(("permute_tc".to_string(), r));
    let r = fd_check(&[input(&[2, 6], 42)], 12, 42, |g, v| {
        let y = g.reshape(v[0], vec![3, 4])?;
        weighted_sum(g, y, 11)
    });
    out.push(("reshape".to_string(), r));
    let r = fd_check(&[input(&[2, 5], 43)], 10, 43, |g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, 12)
    });
    out.push(("transpose".to_string(), r));
    let r = fd_check(&[input(&[3, 4], 44), input(&[2, 4], 45), input(&[2], 46)], 12, 44, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y, 13)
    });
    out.push(("linear".to_string(), r));
    let r = fd_check(&[input(&[3, 2], 47), input(&[3, 4], 48)], 12, 47, |g, v| {
        let y = g.concat_last(v[0], v[1])?;
        weighted_sum(g, y, 14)
    });
    out.push(("concat_last".to_string(), r));
    out
}

pub fn lstm() -> Named {
    let mut out = Vec::new();
    for reverse in [false, true] {
        let h = 3;
        let ins = [input(&[5, 2], 51), input(&[4 * h, 2], 52), input(&[4 * h, h], 53), input(&[4 * h], 54)];
        let r = fd_check(&ins, 16, 51, |g, v| {
            let y = g.lstm(v[0], v[1], v[2], v[3], reverse)?;
            weighted_sum(g, y, 15)
        });
        out.push((format!("lstm reverse={reverse}"), r));
    }
    out
}

/// CTC terms only: every parameter reaches the loss without a stop-gradient.
pub fn full_model(probes: usize) -> FdReport {
    let mut model = Model::new(&tiny_model_config(), 5).unwrap();
    let v = video(8, 8, &mut rng(71));
    let loss = LossConfig {
        task: TaskLossConfig { main: 1.0, aux: 0.5, kl: 0.0 },
        distill: None,
    };
    model_fd_check(&mut model, &v, &[1, 3], &loss, probes, 72, |_| true)
}

/// With KL and distillation the teachers are detached, so finite differences
/// agree with the gradient only for parameters no teacher depends on.
pub fn student_parameters(probes: usize) -> FdReport {
    let mut model = Model::new(&tiny_model_config(), 6).unwrap();
    let v = video(8, 8, &mut rng(73));
    let loss = LossConfig {
        task: TaskLossConfig { main: 1.0, aux: 1.0, kl: 1.0 },
        distill: Some(DistillWeights { alpha: 0.7, beta: 1.3, lambda: 0.4 }),
    };
    let student = |n: &str| n.starts_with("dblock") || n.starts_with("auxcls");
    model_fd_check(&mut model, &v, &[2, 1], &loss, probes, 74, student)
}

/// Every operator group.
pub fn all_ops() -> Named {
    [conv2d(), temporal_conv(), pointwise(), reduction(), loss(), layout(), lstm()].concat()
}
