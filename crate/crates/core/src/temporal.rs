//! Temporal head: two (conv K5, ReLU, max-pool 2) blocks over frame
//! features, a bidirectional LSTM and per-step classifiers.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, orthogonal, uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const TCONV_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalConfig {
    /// Frame feature width `D`.
    pub input: usize,
    /// Channels of both temporal conv blocks.
    pub conv_channels: usize,
    /// LSTM hidden size per direction.
    pub hidden: usize,
    /// Number of glosses `V`; the classifiers emit `V + 1` classes.
    pub vocab: usize,
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.conv_channels == 0 || self.hidden == 0 || self.vocab == 0 {
            return Err(Error::Config("temporal head sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.vocab + 1
    }
}

/// `T' = floor(floor(T / 2) / 2)`.
pub fn output_steps(frames: usize) -> usize {
    frames / 2 / 2
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TemporalHead {
    config: TemporalConfig,
    tconv: [Affine; 2],
    fwd: LstmParams,
    bwd: LstmParams,
    cls: Affine,
    auxcls: Affine,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Output of the second conv-pool block, `[T', conv_channels]`.
    pub conv_out: Var,
    /// Main classifier log-probabilities `[T', V + 1]`.
    pub logprobs: Var,
    /// Auxiliary classifier log-probabilities `[T', V + 1]`.
    pub aux_logprobs: Var,
}

fn init_lstm(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LstmParams> {
    let w_ih = store.insert(
        format!("{name}.w_ih"),
        kaiming_uniform(&[4 * hidden, input], input, rng),
    )?;
    // each gate's recurrent block is its own orthogonal matrix
    let mut rec = Vec::with_capacity(4 * hidden * hidden);
    for _ in 0..4 {
        rec.extend(orthogonal(hidden, rng));
    }
    let w_hh = store.insert(format!("{name}.w_hh"), Tensor::from_f64(vec![4 * hidden, hidden], &rec)?)?;
    let mut bias = vec![0.0f32; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    let b = store.insert(format!("{name}.b"), Tensor::new(vec![4 * hidden], bias)?)?;
    Ok(LstmParams { w_ih, w_hh, b })
}

fn init_affine(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Result<Affine> {
    let bound = (1.0 / inp as f64).sqrt();
    let w = store.insert(format!("{name}.w"), uniform(&[out, inp], bound, rng))?;
    let b = store.insert(format!("{name}.b"), Tensor::zeros(&[out]))?;
    Ok(Affine { w, b })
}

impl TemporalHead {
    /// Registers `tconv{1,2}.*`, `lstm.{fwd,bwd}.*`, `cls.*` and `auxcls.*`.
    pub fn init(store: &mut ParamStore, config: &TemporalConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.conv_channels;
        let mut tconv = Vec::with_capacity(2);
        for (k, cin) in [(1, config.input), (2, c)] {
            let w = store.insert(
                format!("tconv{k}.w"),
                kaiming_uniform(&[c, cin, TCONV_KERNEL], cin * TCONV_KERNEL, rng),
            )?;
            let b = store.insert(format!("tconv{k}.b"), Tensor::zeros(&[c]))?;
            tconv.push(Affine { w, b });
        }
        let fwd = init_lstm(store, "lstm.fwd", c, config.hidden, rng)?;
        let bwd = init_lstm(store, "lstm.bwd", c, config.hidden, rng)?;
        let cls = init_affine(store, "cls", config.classes(), 2 * config.hidden, rng)?;
        let auxcls = init_affine(store, "auxcls", config.classes(), c, rng)?;
        Ok(TemporalHead {
            config: *config,
            tconv: [tconv[0], tconv[1]],
            fwd,
            bwd,
            cls,
            auxcls,
        })
    }

    pub fn config(&self) -> &TemporalConfig {
        &self.config
    }

    pub fn lstm_params(&self) -> (LstmParams, LstmParams) {
        (self.fwd, self.bwd)
    }

    pub fn classifier_params(&self) -> [(ParamId, ParamId); 2] {
        [(self.cls.w, self.cls.b), (self.auxcls.w, self.auxcls.b)]
    }

    /// `f_spatial [T, D]` to per-step log-probabilities over `V + 1` classes.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f_spatial: Var) -> Result<HeadOutput> {
        let dims = g.dims(f_spatial);
        if dims.len() != 2 || dims[1] != self.config.input {
            return Err(Error::shape(
                "temporal_forward",
                format!("features {dims:?}, expected [T, {}]", self.config.input),
            ));
        }
        if dims[0] < 4 {
            return Err(Error::invalid(
                "temporal_forward",
                format!("need at least 4 frames, got {}", dims[0]),
            ));
        }
        let mut h = f_spatial;
        for conv in &self.tconv {
            let ct = g.transpose(h)?;
            let y = g.conv3d_temporal(ct, p.var(conv.w), p.var(conv.b))?;
            let y = g.relu(y)?;
            let y = g.transpose(y)?;
            h = g.max_pool_1d(y)?;
        }
        let conv_out = h;
        let f = g.lstm(conv_out, p.var(self.fwd.w_ih), p.var(self.fwd.w_hh), p.var(self.fwd.b), false)?;
        let b = g.lstm(conv_out, p.var(self.bwd.w_ih), p.var(self.bwd.w_hh), p.var(self.bwd.b), true)?;
        let both = g.concat_last(f, b)?;
        let logits = g.linear(both, p.var(self.cls.w), p.var(self.cls.b))?;
        let logprobs = g.log_softmax(logits, 1)?;
        let aux_logprobs = self.aux_logits(g, p, conv_out)?;
        Ok(HeadOutput {
            conv_out,
            logprobs,
            aux_logprobs,
        })
    }

    /// Affine + log-softmax directly on the conv output `[T', C]`.
    pub fn aux_logits(&self, g: &mut Graph, p: &Bound, conv_out: Var) -> Result<Var> {
        let logits = g.linear(conv_out, p.var(self.auxcls.w), p.var(self.auxcls.b))?;
        g.log_softmax(logits, 1)
    }
}
