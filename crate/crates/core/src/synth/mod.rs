//! Procedural axial ultrasound sequences with aorta and catheter masks.
//!
//! Frames are rendered from a three-intensity anatomy model (background,
//! vessel wall, lumen) plus a bright catheter disc, multiplied by a smoothed
//! unit-mean speckle field, with optional acoustic-shadow wedges.

pub mod augment;
pub mod dataset;
pub mod generate;

pub use augment::{augment, AugmentParams};
pub use dataset::{
    generate_dataset, read_dataset, read_manifest, write_dataset, DatasetManifest, Sequence,
    SequenceEntry,
};
pub use generate::{generate_sequence, FrameSample, SequenceSpec, Wedge, TILT_ANGLES};
