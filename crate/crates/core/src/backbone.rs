//! Shared convolutional feature extractor. Each stage halves the spatial
//! extent (stride-2 conv, norm, relu, conv, norm, relu), so `n` stages
//! downsample by `2^n`; the desk and full-size configurations use four.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Norm};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of each stage, shallowest first.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            widths: vec![8, 16, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::contract(format!("invalid backbone config {self:?}")));
        }
        Ok(())
    }

    /// `(channels, height, width)` of every level for an `h x w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<[usize; 3]> {
        self.widths
            .iter()
            .enumerate()
            .map(|(l, &c)| [c, h >> (l + 1), w >> (l + 1)])
            .collect()
    }
}

/// Levels `L1..Ln` of one image, shallowest first, as tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> Var {
        *self.levels.last().expect("pyramid has at least one level")
    }

    pub fn values<T: Real>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.levels.iter().map(|&v| tape.value(v).clone()).collect()
    }

    /// Re-enters stored level values as constants on `tape`.
    pub fn constants<T: Real>(tape: &mut Tape<T>, levels: &[Tensor<T>]) -> Self {
        FeaturePyramid {
            levels: levels.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages());
        let mut c_in = config.in_channels;
        for (k, &c) in config.widths.iter().enumerate() {
            let p = format!("backbone/stage{}", k + 1);
            stages.push(Stage {
                conv1: Conv2d::new(store, init, &format!("{p}/conv1"), c_in, c, 3, 2, 1)?,
                norm1: Norm::new(store, &format!("{p}/norm1"), &[c, 1, 1], 0)?,
                conv2: Conv2d::new(store, init, &format!("{p}/conv2"), c, c, 3, 1, 1)?,
                norm2: Norm::new(store, &format!("{p}/norm2"), &[c, 1, 1], 0)?,
            });
            c_in = c;
        }
        Ok(Backbone { config, stages })
    }

    /// Runs `image: [C_in, H, W]` through every stage. `H` and `W` must be
    /// divisible by `2^stages`.
    pub fn extract_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<FeaturePyramid> {
        let s = tape.shape(image).to_vec();
        let f = self.config.downsampling();
        if s.len() != 3 || s[0] != self.config.in_channels || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
            return Err(Error::dim(format!(
                "backbone: input {s:?} must be [{}, H, W] with H, W divisible by {f}",
                self.config.in_channels
            )));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            x = st.conv1.forward(tape, store, x)?;
            x = st.norm1.forward(tape, store, x)?;
            x = tape.relu(x)?;
            x = st.conv2.forward(tape, store, x)?;
            x = st.norm2.forward(tape, store, x)?;
            x = tape.relu(x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Per-level 1x1 convolutions bringing backbone widths to the decoder's.
#[derive(Clone, Debug)]
pub struct ChannelReducer {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    convs: Vec<Conv2d>,
}

impl ChannelReducer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        inputs: &[usize],
        outputs: &[usize],
    ) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::contract(format!(
                "reducer: {} input widths vs {} output widths",
                inputs.len(),
                outputs.len()
            )));
        }
        let convs = inputs
            .iter()
            .zip(outputs)
            .enumerate()
            .map(|(l, (&ci, &co))| Conv2d::new(store, init, &format!("reducer/level{}", l + 1), ci, co, 1, 1, 0))
            .collect::<Result<_>>()?;
        Ok(ChannelReducer {
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            convs,
        })
    }

    pub fn reduce_level<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        level: usize,
        x: Var,
    ) -> Result<Var> {
        let conv = self
            .convs
            .get(level)
            .ok_or_else(|| Error::dim(format!("reducer has no level {}", level + 1)))?;
        let c = tape.shape(x)[0];
        if c != self.inputs[level] {
            return Err(Error::dim(format!(
                "reducer level {}: expected {} channels, got {c}",
                level + 1,
                self.inputs[level]
            )));
        }
        conv.forward(tape, store, x)
    }

    pub fn reduce_channels<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        if pyramid.levels.len() != self.convs.len() {
            return Err(Error::dim(format!(
                "reducer has {} levels, pyramid {}",
                self.convs.len(),
                pyramid.levels.len()
            )));
        }
        let levels = pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(l, &x)| self.reduce_level(tape, store, l, x))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }
}

/// `[C, h, w] -> [h*w, C]`; row `i` is spatial site `(i / w, i % w)`.
pub fn flatten_tokens<T: Real>(tape: &mut Tape<T>, level: Var) -> Result<Var> {
    let s = tape.shape(level).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("flatten_tokens: expected [C, h, w], got {s:?}")));
    }
    let x = tape.reshape(level, &[s[0], s[1] * s[2]])?;
    tape.transpose(x)
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<T: Real>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::dim(format!("unflatten_tokens: {s:?} is not {h}x{w} tokens")));
    }
    let x = tape.transpose(tokens)?;
    tape.reshape(x, &[s[1], h, w])
}
