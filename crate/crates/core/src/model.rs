//! The full segmentation network: shared backbone over the three branches,
//! attention-in-attention transformer on the deepest level, and the
//! temporal decoder over the reduced pyramids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{flatten_tokens, unflatten_tokens, Backbone, BackboneConfig, ChannelReducer, FeaturePyramid};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::transformer::{pool_mask, Reference, Transformer, TransformerConfig};

/// Which structure a model segments. Each target gets its own model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Aorta,
    Catheter,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aorta" => Ok(Target::Aorta),
            "catheter" => Ok(Target::Catheter),
            other => Err(Error::contract(format!("unknown target {other:?} (aorta | catheter)"))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Aorta => "aorta",
            Target::Catheter => "catheter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub heads: usize,
    pub inner_width: usize,
    pub ffn_hidden: usize,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64 input, 4x4 tokens.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            backbone: BackboneConfig::default(),
            heads: 4,
            inner_width: 64,
            ffn_hidden: 128,
            decoder: DecoderConfig::default(),
            seed: 0,
        }
    }

    /// 320x320 input, 20x20 tokens, same widths as the desk model.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 320,
            ..Self::desk()
        }
    }

    /// 16x16 input, two backbone stages. Small enough for exhaustive
    /// finite-difference checks.
    pub fn two_stage() -> Self {
        ModelConfig {
            image_size: 16,
            backbone: BackboneConfig {
                in_channels: 1,
                widths: vec![2, 4],
            },
            heads: 2,
            inner_width: 3,
            ffn_hidden: 4,
            decoder: DecoderConfig {
                widths: vec![2, 3],
                out_width: 2,
                joint_kernel: false,
            },
            seed: 5,
        }
    }

    pub fn channels(&self) -> usize {
        *self.backbone.widths.last().unwrap_or(&0)
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.backbone.downsampling().max(1);
        (g, g)
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            channels: self.channels(),
            heads: self.heads,
            inner_width: self.inner_width,
            grid: self.grid(),
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        let f = self.backbone.downsampling();
        if self.image_size == 0 || !self.image_size.is_multiple_of(f) {
            return Err(Error::contract(format!(
                "image size {} must be a positive multiple of {f}",
                self.image_size
            )));
        }
        if self.decoder.widths.len() != self.backbone.stages() {
            return Err(Error::contract(format!(
                "{} decoder widths for {} backbone stages",
                self.decoder.widths.len(),
                self.backbone.stages()
            )));
        }
        self.transformer().validate()
    }
}

/// A branch either enters as an image or as a cached backbone pyramid.
#[derive(Clone, Copy, Debug)]
pub enum BranchInput<'a, T: Real> {
    Image(&'a Tensor<T>),
    Features(&'a [Tensor<T>]),
}

/// A reference frame and its (ground-truth or predicted) mask, `[H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceInput<'a, T: Real> {
    pub branch: BranchInput<'a, T>,
    pub mask: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, H, W]` probabilities.
    pub prob: Var,
    /// Transformer output for the search frame, `[grid_h * grid_w, C]`.
    pub tokens: Var,
    /// Backbone pyramid of the search frame.
    pub search_features: FeaturePyramid,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub reducer: ChannelReducer,
    pub transformer: Transformer,
    pub decoder: Decoder,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let backbone = Backbone::new(&mut store, &mut init, config.backbone.clone())?;
        let reducer = ChannelReducer::new(&mut store, &mut init, &config.backbone.widths, &config.decoder.widths)?;
        let transformer = Transformer::new(&mut store, &mut init, config.transformer())?;
        let decoder = Decoder::new(&mut store, &mut init, config.decoder.clone())?;
        Ok(Model {
            config,
            store,
            backbone,
            reducer,
            transformer,
            decoder,
        })
    }

    fn check_frame(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        let s = self.config.image_size;
        if t.shape() != [s, s] {
            return Err(Error::dim(format!("{what}: expected [{s}, {s}], got {:?}", t.shape())));
        }
        Ok(())
    }

    fn pyramid(&self, tape: &mut Tape<T>, b: BranchInput<'_, T>, what: &str) -> Result<FeaturePyramid> {
        match b {
            BranchInput::Image(img) => {
                self.check_frame(img, what)?;
                let s = self.config.image_size;
                let x = tape.constant(img.reshaped([1, s, s])?);
                self.backbone.extract_features(tape, &self.store, x)
            }
            BranchInput::Features(levels) => {
                let want = self.config.backbone.level_shapes(self.config.image_size, self.config.image_size);
                if levels.len() != want.len() || levels.iter().zip(&want).any(|(t, w)| t.shape() != &w[..]) {
                    return Err(Error::dim(format!("{what}: cached features do not match the backbone")));
                }
                Ok(FeaturePyramid::constants(tape, levels))
            }
        }
    }

    fn reference(&self, tape: &mut Tape<T>, p: &FeaturePyramid, mask: &Tensor<T>, what: &str) -> Result<Reference> {
        self.check_frame(mask, what)?;
        let tokens = flatten_tokens(tape, p.deepest())?;
        let mask = tape.constant(pool_mask(mask, self.config.grid())?);
        Ok(Reference { tokens, mask })
    }

    /// One prediction for `search` given the initial and intermediate
    /// references and any memory entries (long-term references).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        initial: ReferenceInput<'_, T>,
        intermediate: ReferenceInput<'_, T>,
        search: BranchInput<'_, T>,
        memory: &[ReferenceInput<'_, T>],
    ) -> Result<ForwardOutput> {
        let p_init = self.pyramid(tape, initial.branch, "initial frame")?;
        let p_inter = self.pyramid(tape, intermediate.branch, "intermediate frame")?;
        let p_search = self.pyramid(tape, search, "search frame")?;
        let r_init = self.reference(tape, &p_init, initial.mask, "initial mask")?;
        let r_inter = self.reference(tape, &p_inter, intermediate.mask, "intermediate mask")?;
        let mut r_mem = Vec::with_capacity(memory.len());
        for m in memory {
            let p = self.pyramid(tape, m.branch, "memory frame")?;
            r_mem.push(self.reference(tape, &p, m.mask, "memory mask")?);
        }
        let s_tokens = flatten_tokens(tape, p_search.deepest())?;
        let fused = self.transformer.forward(tape, &self.store, s_tokens, r_init, r_inter, &r_mem)?;
        let (gh, gw) = self.config.grid();
        let fused_map = unflatten_tokens(tape, fused, gh, gw)?;

        let d_init = self.reducer.reduce_channels(tape, &self.store, &p_init)?;
        let d_inter = self.reducer.reduce_channels(tape, &self.store, &p_inter)?;
        let n = p_search.levels.len();
        let mut d_search = Vec::with_capacity(n);
        for (l, &x) in p_search.levels.iter().enumerate() {
            let x = if l + 1 == n { fused_map } else { x };
            d_search.push(self.reducer.reduce_level(tape, &self.store, l, x)?);
        }
        let d_search = FeaturePyramid { levels: d_search };
        let prob = self.decoder.decode(tape, &self.store, &d_init, &d_inter, &d_search)?;
        Ok(ForwardOutput {
            prob,
            tokens: fused,
            search_features: p_search,
        })
    }
}
