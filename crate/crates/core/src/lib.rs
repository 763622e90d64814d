//! Temporal attention-in-attention segmentation of axial ultrasound
//! sequences.
//!
//! The crate carries everything the network needs, bottom-up: a small
//! reverse-mode autodiff engine ([`autodiff`]), a procedural ultrasound
//! sequence generator ([`synth`]), the convolutional [`backbone`], the
//! attention-in-attention [`transformer`], the temporal 3D-deconvolution
//! [`decoder`], [`losses`] and [`metrics`], and a K-means [`cluster`]
//! baseline for catheter extraction.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod cluster;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{BranchInput, Model, ModelConfig, ReferenceInput, Target};
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
