//! Reverse-mode gradients of every differentiable operator against central
//! finite differences.

mod common;

use common::*;
use mamfsd_core::Graph;

fn assert_ok(name: &str, r: FdReport) {
    assert!(r.ok(), "{name}: {} of {} probes failed, worst rel err {:.3e}", r.failures, r.probes, r.worst);
}

#[test]
fn operator_gradients() {
    for (name, r) in gradients::all_ops() {
        assert_ok(&name, r);
    }
}

#[test]
fn multiply_used_nodes_sum_their_gradients() {
    // f(x) = sum(r * (x*x + x + sigmoid(x))) uses x four times
    let r = fd_check(&[(vec![4], uniform(4, -1.0, 1.0, &mut rng(61)))], 4, 61, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let s = g.add(sq, v[0])?;
        let sg = g.sigmoid(v[0])?;
        let y = g.add(s, sg)?;
        weighted_sum(g, y, 16)
    });
    assert_ok("sum of uses", r);
    let mut g = Graph::new();
    let x = g.param_f64(vec![1], vec![0.7]).unwrap();
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap(), &[2.0 * 0.7 + 1.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param_f64(vec![2], vec![0.3, -0.4]).unwrap();
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.mean(y).unwrap();
    let gr = g.backward(s).unwrap();
    // only the direct path counts: d/dx mean(x * c) = c / n
    assert_eq!(gr.get(x).unwrap(), &[0.3 / 2.0, -0.4 / 2.0]);
}

#[test]
fn full_model_ctc_gradients() {
    let r = gradients::full_model(120);
    assert_ok("full model", r);
    assert!(r.probes >= 100);
}

#[test]
fn full_objective_gradients_on_student_only_parameters() {
    assert_ok("student parameters", gradients::student_parameters(60));
}
