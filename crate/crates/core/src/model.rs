//! The full recognizer: backbone, temporal head, task loss surrogate and
//! self-distillation, over one named parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, StageFeatures};
use crate::distill::{self_distill_loss, total_loss, DistillWeights, LossReport};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::temporal::{HeadOutput, TemporalConfig, TemporalHead};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tconv_channels: usize,
    pub hidden: usize,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            tconv_channels: 64,
            hidden: 64,
            vocab: 10,
        }
    }
}

impl ModelConfig {
    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig {
            input: self.backbone.feature_dim(),
            conv_channels: self.tconv_channels,
            hidden: self.hidden,
            vocab: self.vocab,
        }
    }
}

/// Weights of the task loss: main CTC, auxiliary CTC on the conv output and
/// `KL(main || aux)` with the main distribution detached. A zero weight
/// skips the term entirely.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLossConfig {
    pub main: f64,
    pub aux: f64,
    pub kl: f64,
}

impl Default for TaskLossConfig {
    fn default() -> Self {
        TaskLossConfig {
            main: 1.0,
            aux: 1.0,
            kl: 1.0,
        }
    }
}

impl TaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("main", self.main), ("aux", self.aux), ("kl", self.kl)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss.{name} = {w} must be finite and >= 0")));
            }
        }
        if self.main == 0.0 && self.aux == 0.0 {
            return Err(Error::Config("at least one CTC term needs a positive weight".into()));
        }
        Ok(())
    }
}

/// `None` disables distillation: the terms are neither built nor logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub task: TaskLossConfig,
    pub distill: Option<DistillWeights>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            task: TaskLossConfig::default(),
            distill: Some(DistillWeights::default()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    head: TemporalHead,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub stages: StageFeatures,
    pub head: HeadOutput,
}

impl Model {
    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::init(&mut params, &config.backbone, &mut rng)?;
        let head = TemporalHead::init(&mut params, &config.temporal(), &mut rng)?;
        Ok(Model {
            config: config.clone(),
            params,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &TemporalHead {
        &self.head
    }

    pub fn classes(&self) -> usize {
        self.config.vocab + 1
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, video: Var) -> Result<ModelOutput> {
        let stages = self.backbone.extract(g, p, video)?;
        let head = self.head.forward(g, p, stages.features)?;
        Ok(ModelOutput { stages, head })
    }

    /// Builds the training loss for one sample and returns it with its report.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        out: &ModelOutput,
        label: &[usize],
        cfg: &LossConfig,
    ) -> Result<(Var, LossReport)> {
        cfg.task.validate()?;
        let mut task: Option<Var> = None;
        let mut push = |g: &mut Graph, term: Var, w: f64| -> Result<()> {
            let t = g.scale(term, w)?;
            task = Some(match task {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
            Ok(())
        };
        if cfg.task.main > 0.0 {
            let l = g.ctc_loss(out.head.logprobs, label)?;
            push(g, l, cfg.task.main)?;
        }
        if cfg.task.aux > 0.0 {
            let l = g.ctc_loss(out.head.aux_logprobs, label)?;
            push(g, l, cfg.task.aux)?;
        }
        if cfg.task.kl > 0.0 {
            let teacher = g.detach(out.head.logprobs);
            let l = g.kl_div(teacher, out.head.aux_logprobs)?;
            push(g, l, cfg.task.kl)?;
        }
        let task = task.expect("validated: at least one CTC term");
        let mut report = LossReport {
            loss_task: g.scalar(task),
            ..LossReport::default()
        };
        let total = match &cfg.distill {
            Some(w) => {
                let d = self_distill_loss(g, p, &self.backbone, &out.stages, w)?;
                for k in 0..3 {
                    report.loss_mse[k] = g.scalar(d.terms[k]);
                }
                report.weights = w.as_array();
                total_loss(g, task, d.weighted)?
            }
            None => task,
        };
        report.loss_total = g.scalar(total);
        if !report.loss_total.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        Ok((total, report))
    }

    /// Inference-mode log-probabilities `[T', V + 1]` for a prepared video.
    pub fn logprobs(&self, video: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.input(video);
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.tensor(out.head.logprobs))
    }

    /// Same as [`Model::logprobs`] but at full node precision.
    pub fn logprobs_f64(&self, video: &Tensor) -> Result<(Vec<f64>, usize)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.input(video);
        let out = self.forward(&mut g, &p, x)?;
        let steps = g.dims(out.head.logprobs)[0];
        Ok((g.value(out.head.logprobs).to_vec(), steps))
    }
}
