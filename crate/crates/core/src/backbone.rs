//! Four-stage residual frame extractor with motor attention after each
//! stage and D-blocks projecting stage `i` onto the shape of stage `i + 1`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mam::{MamBlock, MamConfig};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem: usize,
    pub channels: [usize; STAGES],
    pub strides: [usize; STAGES],
    pub blocks: [usize; STAGES],
    pub resolution: usize,
    /// Stages `1..=mam_count` get a motor attention block.
    pub mam_count: usize,
    pub mam: MamConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem: 16,
            channels: [16, 32, 64, 128],
            strides: [1, 2, 2, 2],
            blocks: [1, 1, 1, 1],
            resolution: 32,
            mam_count: 4,
            mam: MamConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.strides.contains(&0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.mam_count > STAGES {
            return Err(Error::Config(format!("mam.count {} exceeds {STAGES}", self.mam_count)));
        }
        let total: usize = self.strides.iter().product();
        if self.resolution == 0 || self.resolution % total != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by the cumulative stride {total}",
                self.resolution
            )));
        }
        self.mam.validate()
    }

    /// Frame feature width `D` (stage 4 channels after pooling).
    pub fn feature_dim(&self) -> usize {
        self.channels[STAGES - 1]
    }

    /// `[C_i, H_i, W_i]` of stage `i` (0-based).
    pub fn stage_dims(&self, i: usize) -> [usize; 3] {
        let side = self.resolution / self.strides[..=i].iter().product::<usize>();
        [self.channels[i], side, side]
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.insert(
            format!("{name}.w"),
            kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
        )?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Conv {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Two 3x3 convs with a skip; the skip is a strided 1x1 conv when the shape
/// changes.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Conv>,
}

impl ResBlock {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.apply(g, p, h)?;
        let skip = match &self.proj {
            Some(c) => c.apply(g, p, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv,
    stages: Vec<Vec<ResBlock>>,
    mams: Vec<MamBlock>,
    dblocks: Vec<Conv>,
}

/// Backbone outputs for one video. Stage tensors are `[T, C_i, H_i, W_i]`,
/// captured after the stage's gate.
#[derive(Clone, Debug)]
pub struct StageFeatures {
    pub stages: [Var; STAGES],
    /// Attention maps `[C_i, T, H_i, W_i]` for stages that carry a gate.
    pub maps: Vec<Var>,
    /// Pooled frame features `[T, D]`.
    pub features: Var,
}

impl Backbone {
    /// Registers `stem.*`, `stage{i}.block{j}.*`, `mam{i}.*` and `dblock{i}.*`.
    pub fn init(store: &mut ParamStore, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv::init(store, "stem", INPUT_CHANNELS, config.stem, 3, 1, rng)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut mams = Vec::new();
        let mut cin = config.stem;
        for i in 0..STAGES {
            let cout = config.channels[i];
            let mut blocks = Vec::with_capacity(config.blocks[i]);
            for j in 0..config.blocks[i] {
                let stride = if j == 0 { config.strides[i] } else { 1 };
                let name = format!("stage{}.block{}", i + 1, j + 1);
                let conv1 = Conv::init(store, &format!("{name}.conv1"), cin, cout, 3, stride, rng)?;
                let conv2 = Conv::init(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng)?;
                let proj = if stride != 1 || cin != cout {
                    Some(Conv::init(store, &format!("{name}.proj"), cin, cout, 1, stride, rng)?)
                } else {
                    None
                };
                blocks.push(ResBlock { conv1, conv2, proj });
                cin = cout;
            }
            stages.push(blocks);
            if i < config.mam_count {
                mams.push(MamBlock::init(store, i + 1, cout, &config.mam, rng)?);
            }
        }
        let mut dblocks = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES - 1 {
            dblocks.push(Conv::init(
                store,
                &format!("dblock{}", i + 1),
                config.channels[i],
                config.channels[i + 1],
                3,
                config.strides[i + 1],
                rng,
            )?);
        }
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
            mams,
            dblocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn mam(&self, stage: usize) -> Option<&MamBlock> {
        stage.checked_sub(1).and_then(|i| self.mams.get(i))
    }

    pub fn mams(&self) -> &[MamBlock] {
        &self.mams
    }

    /// `video [T, 3, H, W]` to per-stage features and pooled frame features.
    pub fn extract(&self, g: &mut Graph, p: &Bound, video: Var) -> Result<StageFeatures> {
        self.extract_with(g, p, video, |g, i, h| match self.mams.get(i) {
            Some(mam) => {
                // time becomes axis 1 so the temporal kernels see every frame
                let ct = g.permute_tc(h)?;
                let (gated, map) = mam.forward(g, p, ct)?;
                Ok((g.permute_tc(gated)?, Some(map)))
            }
            None => Ok((h, None)),
        })
    }

    /// [`Backbone::extract`] with the per-stage gate replaced by `gate`, which
    /// receives the 0-based stage index and the `[T, C, H, W]` stage output and
    /// returns the gated output plus an optional attention map.
    pub fn extract_with<F>(&self, g: &mut Graph, p: &Bound, video: Var, mut gate: F) -> Result<StageFeatures>
    where
        F: FnMut(&mut Graph, usize, Var) -> Result<(Var, Option<Var>)>,
    {
        let dims = g.dims(video);
        let r = self.config.resolution;
        if dims.len() != 4 || dims[1] != INPUT_CHANNELS || dims[2] != r || dims[3] != r {
            return Err(Error::shape(
                "extract",
                format!("video {dims:?}, expected [T, {INPUT_CHANNELS}, {r}, {r}]"),
            ));
        }
        if dims[0] == 0 {
            return Err(Error::invalid("extract", "video has no frames"));
        }
        let mut h = self.stem.apply(g, p, video)?;
        h = g.relu(h)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut maps = Vec::new();
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(g, p, h)?;
            }
            let (gated, map) = gate(g, i, h)?;
            h = gated;
            maps.extend(map);
            stages.push(h);
        }
        let features = g.global_avg_pool_2d(h)?;
        Ok(StageFeatures {
            stages: stages.try_into().expect("four stages"),
            maps,
            features,
        })
    }

    /// D-block `i` (1-based, `i` in 1..=3): strided 3x3 conv from stage `i`
    /// to the shape of stage `i + 1`.
    pub fn dblock_project(&self, g: &mut Graph, p: &Bound, i: usize, s_i: Var) -> Result<Var> {
        if i == STAGES {
            return Err(Error::invalid(
                "dblock_project",
                "stage 4 only serves as a teacher and has no D-block",
            ));
        }
        let conv = i
            .checked_sub(1)
            .and_then(|k| self.dblocks.get(k))
            .ok_or_else(|| Error::invalid("dblock_project", format!("no D-block for stage {i}")))?;
        let dims = g.dims(s_i);
        let [c, hgt, wid] = self.config.stage_dims(i - 1);
        if dims.len() != 4 || dims[1..] != [c, hgt, wid] {
            return Err(Error::shape(
                "dblock_project",
                format!("stage {i} features {dims:?}, expected [T, {c}, {hgt}, {wid}]"),
            ));
        }
        conv.apply(g, p, s_i)
    }

    pub fn dblock_params(&self, i: usize) -> Option<(ParamId, ParamId)> {
        i.checked_sub(1)
            .and_then(|k| self.dblocks.get(k))
            .map(|c| (c.w, c.b))
    }
}
