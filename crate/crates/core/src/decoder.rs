//! Temporal 3D-deconvolution decoder.
//!
//! At every pyramid level the initial, intermediate and search feature maps
//! (and, below the deepest level, the previous stage's output) are stacked
//! along a time axis into `[C, T, h, w]`. A `T x 1 x 1` convolution reduces
//! time to one slice, a `1 x 2 x 2` transposed convolution doubles the
//! spatial extent, and channel norm + ReLU follow. A final 1x1 convolution
//! and sigmoid give the probability map.
//!
//! With `joint_kernel` set, time is instead reduced to two slices which the
//! upsampling kernel consumes together, i.e. a single `2 x 2 x 2` kernel
//! over (time, height, width).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Norm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channel width at each pyramid level, shallowest first.
    pub widths: Vec<usize>,
    /// Width of the last (full resolution) stage output.
    pub out_width: usize,
    pub joint_kernel: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            widths: vec![8, 16, 16, 32],
            out_width: 8,
            joint_kernel: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.out_width == 0 {
            return Err(Error::contract(format!("invalid decoder config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// 1-based pyramid level this stage consumes.
    pub level: usize,
    pub channels: usize,
    pub out_channels: usize,
    /// Stacked slices: 3 at the deepest level, 4 elsewhere.
    pub time: usize,
    pub joint: bool,
    pub treduce: ParamId,
    pub treduce_bias: ParamId,
    pub upconv: ParamId,
    pub upconv_bias: ParamId,
    pub norm: Norm,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        level: usize,
        channels: usize,
        out_channels: usize,
        time: usize,
        joint: bool,
    ) -> Result<Self> {
        let p = format!("decoder/stage{level}");
        let c = channels;
        let kt = if joint { time - 1 } else { time };
        let t_out = if joint { 2 } else { 1 };
        let treduce = store.add(format!("{p}/treduce/weight"), init.he(&[c, c, kt, 1, 1], c * kt))?;
        let treduce_bias = store.add(format!("{p}/treduce/bias"), Tensor::zeros([c, 1, 1, 1]))?;
        let up_in = c * t_out;
        let upconv = store.add(format!("{p}/upconv/weight"), init.he(&[up_in, out_channels, 1, 2, 2], up_in))?;
        let upconv_bias = store.add(format!("{p}/upconv/bias"), Tensor::zeros([out_channels, 1, 1, 1]))?;
        let norm = Norm::new(store, &format!("{p}/norm"), &[out_channels, 1, 1], 0)?;
        Ok(DecoderStage {
            level,
            channels,
            out_channels,
            time,
            joint,
            treduce,
            treduce_bias,
            upconv,
            upconv_bias,
            norm,
        })
    }

    /// Stack, reduce time, upsample, normalize. `prev` must be present
    /// exactly when this stage stacks four slices.
    pub fn fuse_level<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        initial: Var,
        intermediate: Var,
        search: Var,
        prev: Option<Var>,
    ) -> Result<Var> {
        let want = tape.shape(search).to_vec();
        let mut slices = vec![initial, intermediate, search];
        slices.extend(prev);
        if slices.len() != self.time {
            return Err(Error::dim(format!(
                "decoder level {}: {} slices for a T={} stage",
                self.level,
                slices.len(),
                self.time
            )));
        }
        if want.len() != 3 || want[0] != self.channels || slices.iter().any(|&v| tape.shape(v) != want) {
            let shapes: Vec<Vec<usize>> = slices.iter().map(|&v| tape.shape(v).to_vec()).collect();
            return Err(Error::dim(format!(
                "decoder level {}: slices {shapes:?} are not all [{}, h, w]",
                self.level, self.channels
            )));
        }
        let (c, h, w) = (want[0], want[1], want[2]);
        let mut stacked = Vec::with_capacity(slices.len());
        for s in slices {
            stacked.push(tape.reshape(s, &[c, 1, h, w])?);
        }
        let x = tape.concat(&stacked, 1)?;
        let k = tape.param(store, self.treduce);
        let b = tape.param(store, self.treduce_bias);
        let x = tape.conv3d(x, k, [1, 1, 1])?;
        let x = tape.add(x, b)?;
        let x = if self.joint {
            // [C, 2, h, w] -> [2C, 1, h, w]: the (1, 2, 2) kernel over the
            // folded axis is a (2, 2, 2) kernel over (time, height, width)
            tape.reshape(x, &[2 * c, 1, h, w])?
        } else {
            x
        };
        let k = tape.param(store, self.upconv);
        let b = tape.param(store, self.upconv_bias);
        let y = tape.conv_transpose3d(x, k, [1, 2, 2])?;
        let y = tape.add(y, b)?;
        let y = tape.reshape(y, &[self.out_channels, 2 * h, 2 * w])?;
        let y = self.norm.forward(tape, store, y)?;
        tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    /// Deepest first.
    pub stages: Vec<DecoderStage>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let n = config.widths.len();
        let mut stages = Vec::with_capacity(n);
        for level in (1..=n).rev() {
            let c = config.widths[level - 1];
            let out = if level > 1 { config.widths[level - 2] } else { config.out_width };
            let time = if level == n { 3 } else { 4 };
            stages.push(DecoderStage::new(store, init, level, c, out, time, config.joint_kernel)?);
        }
        let head = Conv2d::new(store, init, "decoder/head", config.out_width, 1, 1, 1, 0)?;
        Ok(Decoder { config, stages, head })
    }

    /// Runs every stage deepest to shallowest and returns the `[1, H, W]`
    /// probability map. The search pyramid's deepest level is expected to
    /// already hold the transformer output.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        initial: &FeaturePyramid,
        intermediate: &FeaturePyramid,
        search: &FeaturePyramid,
    ) -> Result<Var> {
        let n = self.stages.len();
        for (what, p) in [("initial", initial), ("intermediate", intermediate), ("search", search)] {
            if p.levels.len() != n {
                return Err(Error::dim(format!(
                    "{what} pyramid has {} levels, decoder {n}",
                    p.levels.len()
                )));
            }
        }
        let mut prev = None;
        for st in &self.stages {
            let l = st.level - 1;
            let out = st.fuse_level(tape, store, initial.levels[l], intermediate.levels[l], search.levels[l], prev)?;
            prev = Some(out);
        }
        let logits = self.head.forward(tape, store, prev.expect("decoder has stages"))?;
        tape.sigmoid(logits)
    }
}

/// `prob >= threshold` as a 0/1 map.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("binarize threshold {threshold} not in (0, 1)")));
    }
    let t = T::lit(threshold);
    Ok(prob.map(|p| if p >= t { T::one() } else { T::zero() }))
}
