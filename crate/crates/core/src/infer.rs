//! Sequence inference with the reference memory, and the on-disk layout of
//! predictions:
//!
//! ```text
//! out/predictions.json
//! out/seq_<k>/frame_<i>_prob.tns   probabilities [H, W]
//! out/seq_<k>/frame_<i>_mask.tns   binary mask   [H, W]
//! out/seq_<k>/memory_trace.json
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::decoder::binarize;
use crate::error::{Error, Result};
use crate::io::{read_json, read_tensor, write_json, write_tensor};
use crate::memory::{self_dice, MemoryEntry, MemoryEvent, ReferenceMemory, DEFAULT_CAPACITY, DEFAULT_THRESHOLD};
use crate::metrics::dsc;
use crate::model::{BranchInput, Model, ReferenceInput, Target};
use crate::synth::FrameSample;
use crate::tensor::Tensor;
use crate::train::target_mask;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const TRACE_FILE: &str = "memory_trace.json";

/// How a prediction's quality is scored for memory admission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// Agreement of the probability map with its own binarization.
    SelfDice,
    /// Dice against the ground-truth mask (oracle setting).
    Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub memory_capacity: usize,
    pub memory_threshold: f64,
    pub admission: Admission,
    pub binarize_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            memory_capacity: DEFAULT_CAPACITY,
            memory_threshold: DEFAULT_THRESHOLD,
            admission: Admission::SelfDice,
            binarize_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub frame: usize,
    pub prob: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencePrediction {
    pub frames: Vec<FramePrediction>,
    pub trace: Vec<MemoryEvent>,
}

/// Runs the model over a sequence. Frame 0's ground-truth mask is the
/// initial reference; every later frame uses the newest memory entry (or
/// the initial frame while memory is empty) as intermediate reference and
/// all memory entries as extra long-term references.
pub fn infer_sequence(
    model: &Model<f32>,
    frames: &[FrameSample],
    target: Target,
    cfg: &InferenceConfig,
) -> Result<SequencePrediction> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("cannot run inference on an empty sequence"))?;
    let n = model.config.image_size;
    let mut memory = ReferenceMemory::<f32>::new(cfg.memory_capacity, cfg.memory_threshold)?;
    let init_mask = target_mask(first, target);
    let mut init_features: Option<Vec<Tensor>> = None;
    let mut out = Vec::with_capacity(frames.len());

    for (t, frame) in frames.iter().enumerate() {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let init_branch = match &init_features {
            Some(f) => BranchInput::Features(f),
            None => BranchInput::Image(&first.image),
        };
        let initial = ReferenceInput {
            branch: init_branch,
            mask: init_mask,
        };
        let intermediate = match memory.latest() {
            Some(e) => ReferenceInput {
                branch: BranchInput::Features(&e.features),
                mask: &e.mask,
            },
            None => initial,
        };
        let mem: Vec<ReferenceInput<'_, f32>> = memory
            .entries()
            .map(|e| ReferenceInput {
                branch: BranchInput::Features(&e.features),
                mask: &e.mask,
            })
            .collect();
        let fwd = model.forward(&mut tape, initial, intermediate, BranchInput::Image(&frame.image), &mem)?;
        let prob = tape.value(fwd.prob).reshaped([n, n])?;
        if !prob.is_finite() {
            return Err(Error::NonFinite { op: "inference" });
        }
        let mask = binarize(&prob, cfg.binarize_threshold)?;
        let features = fwd.search_features.values(&tape);
        if t == 0 {
            init_features = Some(features);
        } else {
            let dice = match cfg.admission {
                Admission::SelfDice => self_dice(&prob),
                Admission::Truth => dsc(&mask, target_mask(frame, target))?,
            };
            memory.update(MemoryEntry {
                frame: t,
                features,
                mask: mask.clone(),
                dice,
            })?;
        }
        out.push(FramePrediction { frame: t, prob, mask });
    }
    Ok(SequencePrediction {
        frames: out,
        trace: memory.trace().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub target: Target,
    pub sequences: Vec<PredictionEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub directory: String,
    pub frame_count: usize,
}

pub fn sequence_dir(k: usize) -> String {
    format!("seq_{k:03}")
}

pub fn write_predictions(root: &Path, target: Target, sequences: &[SequencePrediction]) -> Result<PredictionManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (k, seq) in sequences.iter().enumerate() {
        let dir = root.join(sequence_dir(k));
        for f in &seq.frames {
            write_tensor(&dir.join(format!("frame_{:03}_prob.tns", f.frame)), &f.prob)?;
            write_tensor(&dir.join(format!("frame_{:03}_mask.tns", f.frame)), &f.mask)?;
        }
        write_json(&dir.join(TRACE_FILE), &seq.trace)?;
        entries.push(PredictionEntry {
            directory: sequence_dir(k),
            frame_count: seq.frames.len(),
        });
    }
    let manifest = PredictionManifest {
        target,
        sequences: entries,
    };
    write_json(&root.join(PREDICTIONS_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_predictions(root: &Path) -> Result<(PredictionManifest, Vec<SequencePrediction>)> {
    let manifest: PredictionManifest = read_json(&root.join(PREDICTIONS_FILE))?;
    let mut out = Vec::with_capacity(manifest.sequences.len());
    for e in &manifest.sequences {
        let dir = root.join(&e.directory);
        let frames = (0..e.frame_count)
            .map(|t| {
                Ok(FramePrediction {
                    frame: t,
                    prob: read_tensor(&dir.join(format!("frame_{t:03}_prob.tns")))?,
                    mask: read_tensor(&dir.join(format!("frame_{t:03}_mask.tns")))?,
                })
            })
            .collect::<Result<_>>()?;
        let trace = read_json(&dir.join(TRACE_FILE))?;
        out.push(SequencePrediction { frames, trace });
    }
    Ok((manifest, out))
}
