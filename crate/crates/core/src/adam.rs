//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moments are stored in `f32` alongside the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One update of a single parameter buffer, all in `f64`. `step` is the
/// 1-based step number after increment.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        let mut p = param[i];
        p -= cfg.lr * cfg.weight_decay * p;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        param[i] = p;
    }
}

/// Applies one Adam step to every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid("adam_step", format!("learning rate {} must be positive", cfg.lr)));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    if state.m.len() != params.len() || grads.data.len() != params.len() {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    state.step += 1;
    for id in params.ids() {
        let i = id.index();
        let t = params.get_mut(id);
        if state.m[i].dims() != t.dims() || state.v[i].dims() != t.dims() {
            return Err(Error::shape("adam_step", format!("moment dims for parameter {i}")));
        }
        let mut p = t.to_f64();
        let mut m = state.m[i].to_f64();
        let mut v = state.v[i].to_f64();
        adam_update(&mut p, &grads.data[i], &mut m, &mut v, state.step, cfg);
        store(t.data_mut(), &p);
        store(state.m[i].data_mut(), &m);
        store(state.v[i].data_mut(), &v);
    }
    Ok(())
}

fn store(dst: &mut [f32], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::full(&[1], value)).unwrap();
        s
    }

    fn grads_of(store: &ParamStore, g: f64) -> ParamGrads {
        let mut gr = ParamGrads::zeros(store);
        gr.data[0][0] = g;
        gr
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameter() {
        let mut p = single(0.75);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let g = grads_of(&p, 0.0);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p.by_name("x").unwrap().data()[0], 0.75);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for g in [3.0, -0.5] {
            let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &cfg);
            let expected = 1.0 - cfg.lr * g / (f64::abs(g) + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let g = grads_of(&p, 1.0);
        assert!(adam_step(&mut p, &g, &mut st, &cfg).is_err());
    }

    fn scalar_adam_trajectory(x0: f64, steps: usize, cfg: &AdamConfig, round_f32: bool) -> f64 {
        // independent scalar recurrence on f(x) = x^2
        let q = |v: f64| if round_f32 { v as f32 as f64 } else { v };
        let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * x;
            x = x - cfg.lr * cfg.weight_decay * x;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x = q(x - cfg.lr * mh / (vh.sqrt() + cfg.eps));
            m = q(m);
            v = q(v);
        }
        x
    }

    #[test]
    fn five_steps_on_square_match_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 1e-2,
            ..AdamConfig::default()
        };
        let (mut x, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        for t in 1..=5 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, t, &cfg);
        }
        let want = scalar_adam_trajectory(1.0, 5, &cfg, false);
        assert!((x[0] - want).abs() < 1e-9, "{} vs {want}", x[0]);

        // the f32-storing optimizer matches the recurrence rounded at the same points
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            let g = 2.0 * p.by_name("x").unwrap().data()[0] as f64;
            let gr = grads_of(&p, g);
            adam_step(&mut p, &gr, &mut st, &cfg).unwrap();
        }
        let want = scalar_adam_trajectory(1.0, 5, &cfg, true);
        let got = p.by_name("x").unwrap().data()[0] as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}
