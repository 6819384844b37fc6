//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, which is a topological
//! order. Node values are held in `f64`; parameters and inputs enter as `f32`
//! [`Tensor`]s and are widened on entry. [`Graph::backward`] walks the tape
//! exactly once in reverse, summing the contributions of every use of a node.

use crate::ctc;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGrads, Conv2dGeom, TemporalGeom};
use crate::gemm::{gemm, Strides};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    dims: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

struct LstmCache {
    /// Activated gates `[T, 4H]` in order i, f, g, o.
    gates: Vec<f64>,
    /// Cell state `[T, H]`.
    cell: Vec<f64>,
    hidden: usize,
    input: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    Temporal {
        x: Var,
        w: Var,
        b: Var,
        geom: TemporalGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool2d(Var),
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean(Var),
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mse(Var, Var),
    Kl(Var, Var),
    PermuteTc(Var),
    Reshape(Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatLast(Var, Var),
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        reverse: bool,
        cache: LstmCache,
    },
    Ctc {
        x: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Temporal { x, w, b, .. } | Linear { x, w, b } => {
                vec![*x, *w, *b]
            }
            Relu(x) | Sigmoid(x) | Tanh(x) | Scale(x, _) | GlobalAvgPool2d(x) | Mean(x)
            | PermuteTc(x) | Reshape(x) | Transpose(x) => vec![*x],
            MaxPool1d { x, .. } | LogSoftmax { x, .. } | Ctc { x, .. } => vec![*x],
            Mul(a, b) | Add(a, b) | Mse(a, b) | Kl(a, b) | ConcatLast(a, b) => vec![*a, *b],
            Lstm {
                x, w_ih, w_hh, b, ..
            } => vec![*x, *w_ih, *w_hh, *b],
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call, kept for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` is not a leaf or received no gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let d = &self.nodes[v.0].data;
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// Node value rounded to `f32`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_f64(n.dims.clone(), &n.data).expect("node dims match data")
    }

    fn push_leaf(&mut self, dims: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            dims,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Which side of every kink the recorded computation took: the sign of
    /// each ReLU input and the winner of each max-pool pair. Two graphs built
    /// the same way with equal signatures lie on one smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => sig.extend(self.nodes[x.0].data.iter().map(|&v| usize::from(v > 0.0))),
                Op::MaxPool1d { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.dims().to_vec(), t.to_f64(), false)
    }

    pub fn input_f64(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("input", format!("dims {dims:?} vs {} values", data.len())));
        }
        Ok(self.push_leaf(dims, data, false))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.dims().to_vec(), t.to_f64(), true)
    }

    pub fn param_f64(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("param", format!("dims {dims:?} vs {} values", data.len())));
        }
        Ok(self.push_leaf(dims, data, true))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (dims, data) = (n.dims.clone(), n.data.clone());
        self.push_leaf(dims, data, false)
    }

    fn push(&mut self, op_name: &'static str, dims: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            dims,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation over a batch of frames: `x [B, C_in, H, W]`,
    /// `w [C_out, C_in, k, k]`, `b [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = Conv2dGeom::new(self.dims(x), self.dims(w), stride, pad)?;
        if self.dims(b) != [geom.cout] {
            return Err(Error::shape("conv2d", format!("bias dims {:?}", self.dims(b))));
        }
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w), self.value(b));
        self.push("conv2d", geom.out_dims(), out, Op::Conv2d { x, w, b, geom })
    }

    /// Convolution along axis 1 of `x [C_in, T, ...]` with kernel `w [C_out, C_in, N]`
    /// and `N/2` zero frames of padding on each side, so T is preserved.
    pub fn conv3d_temporal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.temporal(x, w, b, false)
    }

    /// Per-channel variant of [`Graph::conv3d_temporal`]: `w [C, 1, N]`.
    pub fn conv3d_temporal_depthwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.temporal(x, w, b, true)
    }

    fn temporal(&mut self, x: Var, w: Var, b: Var, depthwise: bool) -> Result<Var> {
        let geom = TemporalGeom::new(self.dims(x), self.dims(w), depthwise)?;
        if self.dims(b) != [geom.cout] {
            return Err(Error::shape("conv3d_temporal", format!("bias dims {:?}", self.dims(b))));
        }
        let out = kernels::temporal_forward(&geom, self.value(x), self.value(w), self.value(b));
        let mut dims = self.dims(x).to_vec();
        dims[0] = geom.cout;
        self.push("conv3d_temporal", dims, out, Op::Temporal { x, w, b, geom })
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let dims = self.dims(x).to_vec();
        self.push(name, dims, data, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        self.map("scale", x, |v| v * a, Op::Scale(x, a))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_dims(name, self.dims(a), self.dims(b))?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.dims(a).to_vec();
        self.push(name, dims, data, op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Mean over the two trailing axes: `[..., H, W] -> [...]`.
    pub fn global_avg_pool_2d(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x);
        if dims.len() < 3 {
            return Err(Error::shape("global_avg_pool_2d", format!("need rank >= 3, got {dims:?}")));
        }
        let plane = dims[dims.len() - 2] * dims[dims.len() - 1];
        if plane == 0 {
            return Err(Error::invalid("global_avg_pool_2d", "empty spatial plane"));
        }
        let out_dims = dims[..dims.len() - 2].to_vec();
        let data = self
            .value(x)
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push("global_avg_pool_2d", out_dims, data, Op::GlobalAvgPool2d(x))
    }

    /// Max over non-overlapping pairs along axis 0 (kernel 2, stride 2); an odd
    /// trailing element is dropped.
    pub fn max_pool_1d(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.is_empty() || dims[0] < 2 {
            return Err(Error::invalid("max_pool_1d", format!("axis 0 too short in {dims:?}")));
        }
        let inner: usize = dims[1..].iter().product();
        let steps = dims[0] / 2;
        let src = self.value(x);
        let mut data = Vec::with_capacity(steps * inner);
        let mut argmax = Vec::with_capacity(steps * inner);
        for t in 0..steps {
            for j in 0..inner {
                let (i0, i1) = ((2 * t) * inner + j, (2 * t + 1) * inner + j);
                let pick = if src[i1] > src[i0] { i1 } else { i0 };
                data.push(src[pick]);
                argmax.push(pick);
            }
        }
        let mut out_dims = dims;
        out_dims[0] = steps;
        self.push("max_pool_1d", out_dims, data, Op::MaxPool1d { x, argmax })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![m], Op::Mean(x))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || dims[axis] == 0 {
            return Err(Error::invalid("log_softmax", format!("axis {axis} of {dims:?}")));
        }
        let len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        self.push("log_softmax", dims, out, Op::LogSoftmax { x, outer, len, inner })
    }

    /// `sum((teacher - student)^2) / n` as a scalar.
    pub fn mse(&mut self, teacher: Var, student: Var) -> Result<Var> {
        same_dims("mse", self.dims(teacher), self.dims(student))?;
        let (y, s) = (self.value(teacher), self.value(student));
        if y.is_empty() {
            return Err(Error::invalid("mse", "empty tensors"));
        }
        let sum: f64 = y.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
        let v = sum / y.len() as f64;
        self.push("mse", vec![], vec![v], Op::Mse(teacher, student))
    }

    /// Row-averaged `KL(p || q)` for log-probability matrices `[R, K]`.
    pub fn kl_div(&mut self, log_p: Var, log_q: Var) -> Result<Var> {
        same_dims("kl_div", self.dims(log_p), self.dims(log_q))?;
        let dims = self.dims(log_p);
        if dims.len() != 2 || dims[0] == 0 {
            return Err(Error::shape("kl_div", format!("need non-empty [R, K], got {dims:?}")));
        }
        let rows = dims[0];
        let (p, q) = (self.value(log_p), self.value(log_q));
        let sum: f64 = p.iter().zip(q).map(|(&a, &b)| a.exp() * (a - b)).sum();
        self.push("kl_div", vec![], vec![sum / rows as f64], Op::Kl(log_p, log_q))
    }

    /// Swaps the two leading axes of a rank-4 tensor: `[A, B, H, W] -> [B, A, H, W]`.
    pub fn permute_tc(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("permute_tc", format!("need rank 4, got {dims:?}")));
        }
        let (a, b, s) = (dims[0], dims[1], dims[2] * dims[3]);
        let data = swap_leading(self.value(x), a, b, s);
        self.push("permute_tc", vec![b, a, dims[2], dims[3]], data, Op::PermuteTc(x))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", self.dims(x))));
        }
        let data = self.value(x).to_vec();
        self.push("reshape", dims, data, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 2 {
            return Err(Error::shape("transpose", format!("need rank 2, got {dims:?}")));
        }
        let data = swap_leading(self.value(x), dims[0], dims[1], 1);
        self.push("transpose", vec![dims[1], dims[0]], data, Op::Transpose(x))
    }

    /// `x [N, In] · w[Out, In]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] || self.dims(b) != [wd[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {xd:?}, w {wd:?}, b {:?}", self.dims(b)),
            ));
        }
        let (n, inp, out) = (xd[0], xd[1], wd[0]);
        let mut data = Vec::with_capacity(n * out);
        for _ in 0..n {
            data.extend_from_slice(self.value(b));
        }
        gemm(n, inp, out, self.value(x), Strides(inp, 1), self.value(w), Strides(1, inp), 1.0, &mut data, Strides(out, 1));
        self.push("linear", vec![n, out], data, Op::Linear { x, w, b })
    }

    /// `[N, P] ++ [N, Q] -> [N, P + Q]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[0] != bd[0] {
            return Err(Error::shape("concat_last", format!("{ad:?} vs {bd:?}")));
        }
        let (n, p, q) = (ad[0], ad[1], bd[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(&self.value(a)[r * p..(r + 1) * p]);
            data.extend_from_slice(&self.value(b)[r * q..(r + 1) * q]);
        }
        self.push("concat_last", vec![n, p + q], data, Op::ConcatLast(a, b))
    }

    /// Single-direction LSTM over `x [T, In]` from zero state. Gate rows of
    /// `w_ih [4H, In]`, `w_hh [4H, H]`, `b [4H]` are ordered input, forget,
    /// cell, output. With `reverse` the sequence is consumed from the last step;
    /// output row `t` is always the hidden state after consuming step `t`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let (xd, wid, whd) = (self.dims(x), self.dims(w_ih), self.dims(w_hh));
        if xd.len() != 2 || wid.len() != 2 || whd.len() != 2 {
            return Err(Error::shape("lstm", format!("x {xd:?}, w_ih {wid:?}, w_hh {whd:?}")));
        }
        let (steps, input, hidden) = (xd[0], xd[1], whd[1]);
        if wid != [4 * hidden, input] || whd != [4 * hidden, hidden] || self.dims(b) != [4 * hidden] {
            return Err(Error::shape(
                "lstm",
                format!("x {xd:?}, w_ih {wid:?}, w_hh {whd:?}, b {:?}", self.dims(b)),
            ));
        }
        let g4 = 4 * hidden;
        let mut pre = Vec::with_capacity(steps * g4);
        for _ in 0..steps {
            pre.extend_from_slice(self.value(b));
        }
        gemm(steps, input, g4, self.value(x), Strides(input, 1), self.value(w_ih), Strides(1, input), 1.0, &mut pre, Strides(g4, 1));
        let whh = self.value(w_hh);
        let mut gates = vec![0.0; steps * g4];
        let mut cell = vec![0.0; steps * hidden];
        let mut out = vec![0.0; steps * hidden];
        let mut h_prev = vec![0.0; hidden];
        let mut c_prev = vec![0.0; hidden];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let z = &mut pre[t * g4..(t + 1) * g4];
            for (r, zr) in z.iter_mut().enumerate() {
                let wrow = &whh[r * hidden..(r + 1) * hidden];
                *zr += wrow.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
            }
            let gt = &mut gates[t * g4..(t + 1) * g4];
            for j in 0..hidden {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[hidden + j]);
                let g = z[2 * hidden + j].tanh();
                let o = sigmoid(z[3 * hidden + j]);
                let c = f * c_prev[j] + i * g;
                let h = o * c.tanh();
                gt[j] = i;
                gt[hidden + j] = f;
                gt[2 * hidden + j] = g;
                gt[3 * hidden + j] = o;
                cell[t * hidden + j] = c;
                out[t * hidden + j] = h;
                c_prev[j] = c;
                h_prev[j] = h;
            }
        }
        let cache = LstmCache {
            gates,
            cell,
            hidden,
            input,
        };
        self.push(
            "lstm",
            vec![steps, hidden],
            out,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                cache,
            },
        )
    }

    /// CTC negative log-likelihood of `label` under `logprobs [T, V+1]`
    /// (blank at index 0).
    pub fn ctc_loss(&mut self, logprobs: Var, label: &[usize]) -> Result<Var> {
        let dims = self.dims(logprobs);
        if dims.len() != 2 {
            return Err(Error::shape("ctc_loss", format!("need [T, V+1], got {dims:?}")));
        }
        let (loss, grad) = ctc::ctc_loss_and_grad(self.value(logprobs), dims[0], dims[1], label)?;
        self.push("ctc_loss", vec![], vec![loss], Op::Ctc { x: logprobs, grad })
    }

    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar root. Gradients are returned for every
    /// differentiable leaf reached.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root_dims = self.dims(root);
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_dims.to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = self.three_slots(grads, *x, *w, *b);
                kernels::conv2d_backward(geom, self.value(*x), self.value(*w), g, ConvGrads { dx, dw, db });
            }
            Op::Temporal { x, w, b, geom } => {
                let (dx, dw, db) = self.three_slots(grads, *x, *w, *b);
                kernels::temporal_backward(geom, self.value(*x), self.value(*w), g, ConvGrads { dx, dw, db });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |d| {
                for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, *x, |d| {
                for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }),
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| add_into(d, g));
                }
            }
            Op::Scale(x, a) => self.accumulate(grads, *x, |d| {
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d += gi * a;
                }
            }),
            Op::GlobalAvgPool2d(x) => {
                let xd = self.dims(*x);
                let plane = xd[xd.len() - 2] * xd[xd.len() - 1];
                let inv = 1.0 / plane as f64;
                self.accumulate(grads, *x, |d| {
                    for (chunk, &gi) in d.chunks_exact_mut(plane).zip(g) {
                        for v in chunk {
                            *v += gi * inv;
                        }
                    }
                });
            }
            Op::MaxPool1d { x, argmax } => self.accumulate(grads, *x, |d| {
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => self.accumulate(grads, *x, |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..*len).map(|k| g[at(k)]).sum();
                        for k in 0..*len {
                            d[at(k)] += g[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
            }),
            Op::Mse(t, s) => {
                let (tv, sv) = (self.value(*t), self.value(*s));
                let c = 2.0 * g[0] / tv.len() as f64;
                self.accumulate(grads, *t, |d| {
                    for ((d, &a), &b) in d.iter_mut().zip(tv).zip(sv) {
                        *d += c * (a - b);
                    }
                });
                self.accumulate(grads, *s, |d| {
                    for ((d, &a), &b) in d.iter_mut().zip(tv).zip(sv) {
                        *d -= c * (a - b);
                    }
                });
            }
            Op::Kl(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let c = g[0] / self.dims(*p)[0] as f64;
                self.accumulate(grads, *p, |d| {
                    for ((d, &a), &b) in d.iter_mut().zip(pv).zip(qv) {
                        *d += c * a.exp() * (a - b + 1.0);
                    }
                });
                self.accumulate(grads, *q, |d| {
                    for (d, &a) in d.iter_mut().zip(pv) {
                        *d -= c * a.exp();
                    }
                });
            }
            Op::PermuteTc(x) => {
                // output is [B, A, H, W]; its gradient swaps back to [A, B, H, W]
                let s = node.dims[2] * node.dims[3];
                let back = swap_leading(g, node.dims[0], node.dims[1], s);
                self.accumulate(grads, *x, |d| add_into(d, &back));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Transpose(x) => {
                let back = swap_leading(g, node.dims[0], node.dims[1], 1);
                self.accumulate(grads, *x, |d| add_into(d, &back));
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.dims(*x)[0], self.dims(*x)[1]);
                let out = self.dims(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.accumulate(grads, *x, |d| {
                    gemm(n, out, inp, g, Strides(out, 1), wv, Strides(inp, 1), 1.0, d, Strides(inp, 1));
                });
                self.accumulate(grads, *w, |d| {
                    gemm(out, n, inp, g, Strides(1, out), xv, Strides(inp, 1), 1.0, d, Strides(inp, 1));
                });
                self.accumulate(grads, *b, |d| {
                    for r in 0..n {
                        add_into(d, &g[r * out..(r + 1) * out]);
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (p, q) = (self.dims(*a)[1], self.dims(*b)[1]);
                let rows = node.dims[0];
                self.accumulate(grads, *a, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * q..(r + 1) * q], &g[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                });
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                cache,
            } => self.lstm_backward(g, y, *x, *w_ih, *w_hh, *b, *reverse, cache, grads),
            Op::Ctc { x, grad } => self.accumulate(grads, *x, |d| {
                for (d, &gi) in d.iter_mut().zip(grad) {
                    *d += g[0] * gi;
                }
            }),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.wants(v) {
            return None;
        }
        let n = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    /// Mutable gradient slots for three distinct nodes.
    #[allow(clippy::type_complexity)]
    fn three_slots<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        c: Var,
    ) -> (Option<&'a mut [f64]>, Option<&'a mut [f64]>, Option<&'a mut [f64]>) {
        assert!(a != b && b != c && a != c, "op inputs must be distinct nodes");
        for v in [a, b, c] {
            // materialize first so the split borrows below are plain lookups
            let _ = self.slot(grads, v);
        }
        let mut order = [(a.0, 0usize), (b.0, 1), (c.0, 2)];
        order.sort();
        let mut out: [Option<&'a mut [f64]>; 3] = [None, None, None];
        let mut rest: &'a mut [Option<Vec<f64>>] = grads;
        let mut base = 0;
        for (idx, which) in order {
            let (head, tail) = rest.split_at_mut(idx - base + 1);
            out[which] = if self.wants(Var(idx)) {
                head[idx - base].as_deref_mut()
            } else {
                None
            };
            rest = tail;
            base = idx + 1;
        }
        let [x, y, z] = out;
        (x, y, z)
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        g: &[f64],
        out: &[f64],
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        reverse: bool,
        cache: &LstmCache,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (hidden, input) = (cache.hidden, cache.input);
        let g4 = 4 * hidden;
        let steps = out.len() / hidden;
        let whh = self.value(w_hh);
        let order = |s: usize| if reverse { steps - 1 - s } else { s };
        let mut dz_all = vec![0.0; steps * g4];
        let mut dwhh = vec![0.0; g4 * hidden];
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        for s in (0..steps).rev() {
            let t = order(s);
            let prev = (s > 0).then(|| order(s - 1));
            let gt = &cache.gates[t * g4..(t + 1) * g4];
            let dz = &mut dz_all[t * g4..(t + 1) * g4];
            for j in 0..hidden {
                let (i, f, gg, o) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                let c = cache.cell[t * hidden + j];
                let c_prev = prev.map_or(0.0, |p| cache.cell[p * hidden + j]);
                let tc = c.tanh();
                let dh = g[t * hidden + j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * gg * i * (1.0 - i);
                dz[hidden + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                dz[3 * hidden + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            for (k, dn) in dh_next.iter_mut().enumerate() {
                *dn = (0..g4).map(|r| whh[r * hidden + k] * dz[r]).sum();
            }
            if let Some(p) = prev {
                let h_prev = &out[p * hidden..(p + 1) * hidden];
                for r in 0..g4 {
                    let row = &mut dwhh[r * hidden..(r + 1) * hidden];
                    for (d, &h) in row.iter_mut().zip(h_prev) {
                        *d += dz[r] * h;
                    }
                }
            }
        }
        let (xv, wv) = (self.value(x), self.value(w_ih));
        self.accumulate(grads, x, |d| {
            gemm(steps, g4, input, &dz_all, Strides(g4, 1), wv, Strides(input, 1), 1.0, d, Strides(input, 1));
        });
        self.accumulate(grads, w_ih, |d| {
            gemm(g4, steps, input, &dz_all, Strides(1, g4), xv, Strides(input, 1), 1.0, d, Strides(input, 1));
        });
        self.accumulate(grads, w_hh, |d| add_into(d, &dwhh));
        self.accumulate(grads, b, |d| {
            for t in 0..steps {
                add_into(d, &dz_all[t * g4..(t + 1) * g4]);
            }
        });
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, &v) in d.iter_mut().zip(g) {
        *d += v;
    }
}

/// `[A, B, S] -> [B, A, S]`.
fn swap_leading(src: &[f64], a: usize, b: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * s..(j * a + i + 1) * s].copy_from_slice(&src[(i * b + j) * s..(i * b + j + 1) * s]);
        }
    }
    out
}
