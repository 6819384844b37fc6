//! Frame-level self-distillation: each D-block projection of stage `i` is
//! pulled toward the gradient-detached stage `i + 1` features.

use crate::backbone::{Backbone, StageFeatures, STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Bound;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("distill.{name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.lambda]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DistillTerms {
    /// Unweighted `L_1..L_3`.
    pub terms: [Var; 3],
    /// `alpha*L1 + beta*L2 + lambda*L3`.
    pub weighted: Var,
}

/// `L_i = mse(detach(S_{i+1}), dblock_i(S_i))` for `i = 1..3`, combined as
/// `alpha*L1 + beta*L2 + lambda*L3` (accumulated left to right).
pub fn self_distill_loss(
    g: &mut Graph,
    p: &Bound,
    backbone: &Backbone,
    stages: &StageFeatures,
    weights: &DistillWeights,
) -> Result<DistillTerms> {
    weights.validate()?;
    let mut terms = Vec::with_capacity(STAGES - 1);
    for i in 1..STAGES {
        let student = backbone.dblock_project(g, p, i, stages.stages[i - 1])?;
        let teacher = g.detach(stages.stages[i]);
        terms.push(g.mse(teacher, student)?);
    }
    let w = weights.as_array();
    let mut weighted = g.scale(terms[0], w[0])?;
    for k in 1..3 {
        let t = g.scale(terms[k], w[k])?;
        weighted = g.add(weighted, t)?;
    }
    Ok(DistillTerms {
        terms: [terms[0], terms[1], terms[2]],
        weighted,
    })
}

/// Exact sum of the task and distillation scalars.
pub fn total_loss(g: &mut Graph, task: Var, distill: Var) -> Result<Var> {
    for v in [task, distill] {
        if g.value(v).len() != 1 {
            return Err(Error::shape("total_loss", format!("expected scalars, got {:?}", g.dims(v))));
        }
        if !g.scalar(v).is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
    }
    g.add(task, distill)
}

/// Scalar loss terms of one training sample (or their batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_mse: [f64; 3],
    pub weights: [f64; 3],
}

impl LossReport {
    /// Running sum used for batch and epoch means.
    pub fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.loss_total += s * other.loss_total;
        self.loss_task += s * other.loss_task;
        for k in 0..3 {
            self.loss_mse[k] += s * other.loss_mse[k];
        }
        self.weights = other.weights;
    }
}
